//! Synthetic few-shot segmentation benchmark.
//!
//! Three domains over a five-shape vocabulary: the source domain carries
//! {disk, rectangle, cross}, the two target domains carry {triangle, annulus}
//! so source and target class sets are disjoint. Domain identity lives in an
//! invertible per-channel style (affine gain/bias plus a fixed low-frequency
//! texture field); class identity lives in geometry alone. Every render is a
//! pure function of `(domain, class, seed)`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeded::{normal, phase_rng};
use crate::tensor::{fdmp, Tensor, TensorError};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;

/// Foreground/background base intensities before styling.
const FG_BASE: f64 = 0.8;
const BG_BASE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unsupported shot count {0}; episodes use 1 or 5 shots")]
    BadShots(usize),
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("class {0:?} is not in this domain's vocabulary")]
    ForeignClass(&'static str),
    #[error("masks must share a rank-2 shape: {0:?} vs {1:?}")]
    MaskShape(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest serialization failed: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// The full shape vocabulary; class ids are stable across domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeClass {
    Disk,
    Rectangle,
    Triangle,
    Annulus,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Disk,
        ShapeClass::Rectangle,
        ShapeClass::Triangle,
        ShapeClass::Annulus,
        ShapeClass::Cross,
    ];

    pub fn id(self) -> usize {
        match self {
            ShapeClass::Disk => 0,
            ShapeClass::Rectangle => 1,
            ShapeClass::Triangle => 2,
            ShapeClass::Annulus => 3,
            ShapeClass::Cross => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Rectangle => "rectangle",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Annulus => "annulus",
            ShapeClass::Cross => "cross",
        }
    }
}

/// Per-channel invertible style: `styled = gain * base + bias + texture`,
/// with a fixed sinusoidal texture field per channel. Pixel noise is a
/// separate nuisance term shared by styled and style-stripped renders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleParams {
    pub gain: [f64; CHANNELS],
    pub bias: [f64; CHANNELS],
    pub tex_amp: [f64; CHANNELS],
    pub tex_freq: [(f64, f64); CHANNELS],
    pub tex_phase: [(f64, f64); CHANNELS],
}

impl StyleParams {
    pub fn identity() -> Self {
        StyleParams {
            gain: [1.0; CHANNELS],
            bias: [0.0; CHANNELS],
            tex_amp: [0.0; CHANNELS],
            tex_freq: [(0.0, 0.0); CHANNELS],
            tex_phase: [(0.0, 0.0); CHANNELS],
        }
    }

    fn texture(&self, ch: usize, x: f64, y: f64) -> f64 {
        let (fx, fy) = self.tex_freq[ch];
        let (px, py) = self.tex_phase[ch];
        let tau = std::f64::consts::TAU;
        self.tex_amp[ch]
            * (tau * (fx * x / IMAGE_SIZE as f64 + px)).sin()
            * (tau * (fy * y / IMAGE_SIZE as f64 + py)).sin()
    }

    /// Forward style application at a pixel.
    pub fn apply(&self, ch: usize, base: f64, x: f64, y: f64) -> f64 {
        self.gain[ch] * base + self.bias[ch] + self.texture(ch, x, y)
    }

    /// Exact inverse of [`StyleParams::apply`]; valid because gains are
    /// non-zero and the texture field is known.
    pub fn invert(&self, ch: usize, styled: f64, x: f64, y: f64) -> f64 {
        (styled - self.bias[ch] - self.texture(ch, x, y)) / self.gain[ch]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub classes: Vec<ShapeClass>,
    pub style: StyleParams,
    pub noise_std: f64,
}

/// Source domain: near-identity style over {disk, rectangle, cross}.
pub fn source_domain() -> DomainSpec {
    DomainSpec {
        name: "source".into(),
        classes: vec![ShapeClass::Disk, ShapeClass::Rectangle, ShapeClass::Cross],
        style: StyleParams::identity(),
        noise_std: 0.02,
    }
}

/// First target domain: {triangle, annulus} under a warm, low-frequency style.
pub fn target_a_domain() -> DomainSpec {
    DomainSpec {
        name: "target-a".into(),
        classes: vec![ShapeClass::Triangle, ShapeClass::Annulus],
        style: StyleParams {
            gain: [1.35, 0.70, 1.10],
            bias: [0.12, -0.06, 0.02],
            tex_amp: [0.16, 0.10, 0.12],
            tex_freq: [(2.0, 3.0), (3.0, 1.0), (1.0, 2.0)],
            tex_phase: [(0.15, 0.40), (0.70, 0.10), (0.30, 0.80)],
        },
        noise_std: 0.02,
    }
}

/// Second target domain: same classes as target-a, opposing channel style.
pub fn target_b_domain() -> DomainSpec {
    DomainSpec {
        name: "target-b".into(),
        classes: vec![ShapeClass::Triangle, ShapeClass::Annulus],
        style: StyleParams {
            gain: [0.60, 1.40, 0.85],
            bias: [-0.10, 0.15, 0.06],
            tex_amp: [0.12, 0.18, 0.10],
            tex_freq: [(3.0, 2.0), (1.0, 3.0), (2.0, 1.0)],
            tex_phase: [(0.55, 0.20), (0.25, 0.65), (0.85, 0.45)],
        },
        noise_std: 0.02,
    }
}

pub fn domain_by_name(name: &str) -> Result<DomainSpec> {
    match name {
        "source" => Ok(source_domain()),
        "target-a" => Ok(target_a_domain()),
        "target-b" => Ok(target_b_domain()),
        other => Err(SynthError::UnknownDomain(other.into())),
    }
}

/// One rendered image/mask pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub class: ShapeClass,
    pub seed: u64,
}

/// A k-shot segmentation episode: k support pairs and one query, same class.
#[derive(Debug, Clone)]
pub struct Episode {
    pub domain: String,
    pub class: ShapeClass,
    pub support: Vec<Sample>,
    pub query: Sample,
}

/// Renders one styled sample; pure in `(spec, class, seed)`.
pub fn render_sample(spec: &DomainSpec, class: ShapeClass, seed: u64) -> Result<Sample> {
    render(spec, class, seed, true)
}

/// Same geometry and the same noise realization as [`render_sample`], but
/// with the domain style left out. Used to isolate style-driven gradients.
pub fn render_sample_stripped(spec: &DomainSpec, class: ShapeClass, seed: u64) -> Result<Sample> {
    render(spec, class, seed, false)
}

fn render(spec: &DomainSpec, class: ShapeClass, seed: u64, styled: bool) -> Result<Sample> {
    if !spec.classes.contains(&class) {
        return Err(SynthError::ForeignClass(class.name()));
    }
    let mut geo = phase_rng(seed, &format!("{}-{}-geom", spec.name, class.name()));
    let shape = ShapeGeometry::draw(class, &mut geo);
    let fg = FG_BASE + geo.gen_range(-0.05..0.05);
    let bg = BG_BASE + geo.gen_range(-0.05..0.05);

    let mut noise = phase_rng(seed, &format!("{}-{}-noise", spec.name, class.name()));
    let n = IMAGE_SIZE;
    let mut mask = vec![0.0; n * n];
    let mut image = vec![0.0; CHANNELS * n * n];
    for row in 0..n {
        for col in 0..n {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            if shape.contains(x, y) {
                mask[row * n + col] = 1.0;
            }
        }
    }
    for ch in 0..CHANNELS {
        for row in 0..n {
            for col in 0..n {
                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                let base = if mask[row * n + col] > 0.0 { fg } else { bg };
                let v = if styled {
                    spec.style.apply(ch, base, x, y)
                } else {
                    base
                };
                image[(ch * n + row) * n + col] = v + spec.noise_std * normal(&mut noise);
            }
        }
    }
    Ok(Sample {
        image: Tensor::from_vec(&[CHANNELS, n, n], image)?,
        mask: Tensor::from_vec(&[n, n], mask)?,
        class,
        seed,
    })
}

/// Draws a k-shot episode; `k` must be 1 or 5.
pub fn sample_episode(spec: &DomainSpec, k: usize, seed: u64) -> Result<Episode> {
    if k != 1 && k != 5 {
        return Err(SynthError::BadShots(k));
    }
    let mut rng = phase_rng(seed, &format!("{}-episode", spec.name));
    let class = spec.classes[rng.gen_range(0..spec.classes.len())];
    let mut support = Vec::with_capacity(k);
    for _ in 0..k {
        let s: u64 = rng.gen();
        support.push(render_sample(spec, class, s)?);
    }
    let q: u64 = rng.gen();
    Ok(Episode {
        domain: spec.name.clone(),
        class,
        support,
        query: render_sample(spec, class, q)?,
    })
}

/// Binary mean IoU of two masks (thresholded at 0.5): the average of the
/// foreground IoU and the background IoU. A class with an empty union
/// contributes 1.0.
pub fn miou(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.ndim() != 2 || pred.dims() != truth.dims() {
        return Err(SynthError::MaskShape(pred.dims().to_vec(), truth.dims().to_vec()));
    }
    let mut inter = [0usize; 2];
    let mut union = [0usize; 2];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p >= 0.5, t >= 0.5);
        inter[0] += (!p && !t) as usize;
        union[0] += (!p || !t) as usize;
        inter[1] += (p && t) as usize;
        union[1] += (p || t) as usize;
    }
    let iou = |cls: usize| {
        if union[cls] == 0 {
            1.0
        } else {
            inter[cls] as f64 / union[cls] as f64
        }
    };
    Ok((iou(0) + iou(1)) / 2.0)
}

/// Mean of [`miou`] over prediction/truth pairs.
pub fn mean_miou<'a>(pairs: impl IntoIterator<Item = (&'a Tensor, &'a Tensor)>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pairs {
        sum += miou(p, t)?;
        n += 1;
    }
    if n == 0 {
        return Err(SynthError::MaskShape(vec![], vec![]));
    }
    Ok(sum / n as f64)
}

// ── geometry ─────────────────────────────────────────────────────────

enum ShapeGeometry {
    Disk { cx: f64, cy: f64, r: f64 },
    Rectangle { cx: f64, cy: f64, hw: f64, hh: f64 },
    Triangle { v: [(f64, f64); 3] },
    Annulus { cx: f64, cy: f64, r_out: f64, r_in: f64 },
    Cross { cx: f64, cy: f64, arm: f64, thick: f64 },
}

impl ShapeGeometry {
    /// Parameter ranges keep every shape fully on canvas with a foreground
    /// fraction in roughly [0.05, 0.5].
    fn draw(class: ShapeClass, rng: &mut impl Rng) -> Self {
        let center = |rng: &mut dyn rand::RngCore| {
            (rng.gen_range(12.0..20.0), rng.gen_range(12.0..20.0))
        };
        match class {
            ShapeClass::Disk => {
                let (cx, cy) = center(rng);
                ShapeGeometry::Disk { cx, cy, r: rng.gen_range(6.0..10.0) }
            }
            ShapeClass::Rectangle => {
                let (cx, cy) = center(rng);
                ShapeGeometry::Rectangle {
                    cx,
                    cy,
                    hw: rng.gen_range(5.0..9.0),
                    hh: rng.gen_range(5.0..9.0),
                }
            }
            ShapeClass::Triangle => {
                let (cx, cy) = center(rng);
                let r = rng.gen_range(7.0..11.0);
                ShapeGeometry::Triangle {
                    v: [
                        (cx, cy - r),
                        (cx - 0.9 * r, cy + 0.65 * r),
                        (cx + 0.9 * r, cy + 0.65 * r),
                    ],
                }
            }
            ShapeClass::Annulus => {
                let (cx, cy) = center(rng);
                let r_out = rng.gen_range(8.0..11.0);
                ShapeGeometry::Annulus { cx, cy, r_out, r_in: r_out * rng.gen_range(0.45..0.60) }
            }
            ShapeClass::Cross => {
                let (cx, cy) = center(rng);
                ShapeGeometry::Cross {
                    cx,
                    cy,
                    arm: rng.gen_range(8.0..11.0),
                    thick: rng.gen_range(2.0..3.2),
                }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            ShapeGeometry::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            ShapeGeometry::Rectangle { cx, cy, hw, hh } => {
                (x - cx).abs() <= hw && (y - cy).abs() <= hh
            }
            ShapeGeometry::Triangle { v } => {
                let sign = |a: (f64, f64), b: (f64, f64)| {
                    (x - b.0) * (a.1 - b.1) - (a.0 - b.0) * (y - b.1)
                };
                let d1 = sign(v[0], v[1]);
                let d2 = sign(v[1], v[2]);
                let d3 = sign(v[2], v[0]);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
            ShapeGeometry::Annulus { cx, cy, r_out, r_in } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
            ShapeGeometry::Cross { cx, cy, arm, thick } => {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                (dx <= thick && dy <= arm) || (dy <= thick && dx <= arm)
            }
        }
    }
}

// ── export ───────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportManifest {
    pub domain: String,
    pub n: usize,
    pub seed: u64,
    pub samples: Vec<ExportEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportEntry {
    pub index: usize,
    pub class: String,
    pub seed: u64,
    pub image: String,
    pub mask: String,
}

/// Writes `n` samples as FDMP image/mask files plus a `manifest.json`;
/// returns the manifest path.
pub fn export_domain(spec: &DomainSpec, n: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let mut rng = phase_rng(seed, &format!("{}-export", spec.name));
    let mut entries = Vec::with_capacity(n);
    for index in 0..n {
        let class = spec.classes[rng.gen_range(0..spec.classes.len())];
        let sample_seed: u64 = rng.gen();
        let sample = render_sample(spec, class, sample_seed)?;
        let image_name = format!("sample_{index:04}.image.fdmp");
        let mask_name = format!("sample_{index:04}.mask.fdmp");
        fdmp::save_tensor(out_dir.join(&image_name), &sample.image)?;
        fdmp::save_tensor(out_dir.join(&mask_name), &sample.mask)?;
        entries.push(ExportEntry {
            index,
            class: class.name().into(),
            seed: sample_seed,
            image: image_name,
            mask: mask_name,
        });
    }
    let manifest = ExportManifest {
        domain: spec.name.clone(),
        n,
        seed,
        samples: entries,
    };
    let path = out_dir.join("manifest.json");
    let file = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_in_its_inputs() {
        let spec = target_a_domain();
        let a = render_sample(&spec, ShapeClass::Triangle, 42).unwrap();
        let b = render_sample(&spec, ShapeClass::Triangle, 42).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        let c = render_sample(&spec, ShapeClass::Triangle, 43).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn class_vocabularies_are_disjoint_between_source_and_targets() {
        let src = source_domain();
        for tgt in [target_a_domain(), target_b_domain()] {
            for c in &tgt.classes {
                assert!(!src.classes.contains(c), "{:?} appears in both", c);
            }
        }
        // and rendering a foreign class is an error
        assert!(matches!(
            render_sample(&src, ShapeClass::Triangle, 0),
            Err(SynthError::ForeignClass("triangle"))
        ));
    }

    #[test]
    fn style_transform_is_invertible() {
        let spec = target_b_domain();
        let style = &spec.style;
        for ch in 0..CHANNELS {
            for &(x, y, v) in &[(0.5, 0.5, 0.8), (13.5, 7.5, 0.2), (31.5, 31.5, 0.55)] {
                let styled = style.apply(ch, v, x, y);
                let back = style.invert(ch, styled, x, y);
                assert!((back - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stripped_render_shares_geometry_and_noise() {
        // with noise disabled, inverting the style on the styled render
        // reproduces the stripped render exactly
        let mut quiet = target_a_domain();
        quiet.noise_std = 0.0;
        let styled = render_sample(&quiet, ShapeClass::Annulus, 7).unwrap();
        let stripped = render_sample_stripped(&quiet, ShapeClass::Annulus, 7).unwrap();
        assert_eq!(styled.mask, stripped.mask);
        let n = IMAGE_SIZE;
        for ch in 0..CHANNELS {
            for row in 0..n {
                for col in 0..n {
                    let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                    let recovered = quiet.style.invert(ch, styled.image.at(&[ch, row, col]), x, y);
                    assert!((recovered - stripped.image.at(&[ch, row, col])).abs() < 1e-12);
                }
            }
        }

        // with noise on, both renders draw the identical noise realization,
        // so the residual after inverting is only noise * (1/gain - 1)
        let spec = target_a_domain();
        let styled = render_sample(&spec, ShapeClass::Annulus, 7).unwrap();
        let stripped = render_sample_stripped(&spec, ShapeClass::Annulus, 7).unwrap();
        for ch in 0..CHANNELS {
            let bound = 6.0 * spec.noise_std * (1.0 / spec.style.gain[ch] - 1.0).abs() + 1e-9;
            for row in 0..n {
                for col in 0..n {
                    let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                    let recovered = spec.style.invert(ch, styled.image.at(&[ch, row, col]), x, y);
                    let residual = recovered - stripped.image.at(&[ch, row, col]);
                    assert!(residual.abs() < bound, "residual {residual} vs {bound}");
                }
            }
        }
    }

    #[test]
    fn foreground_fraction_stays_in_bounds() {
        for spec in [source_domain(), target_a_domain(), target_b_domain()] {
            for &class in &spec.classes {
                for seed in 0..20 {
                    let s = render_sample(&spec, class, seed).unwrap();
                    let frac =
                        s.mask.data().iter().sum::<f64>() / (IMAGE_SIZE * IMAGE_SIZE) as f64;
                    assert!(
                        (0.03..0.55).contains(&frac),
                        "{} {} seed {seed}: fraction {frac}",
                        spec.name,
                        class.name()
                    );
                }
            }
        }
    }

    #[test]
    fn episodes_have_consistent_class_and_shot_count() {
        let spec = source_domain();
        for k in [1, 5] {
            let ep = sample_episode(&spec, k, 11).unwrap();
            assert_eq!(ep.support.len(), k);
            assert!(spec.classes.contains(&ep.class));
            for s in &ep.support {
                assert_eq!(s.class, ep.class);
            }
            assert_eq!(ep.query.class, ep.class);
        }
        assert!(matches!(sample_episode(&spec, 3, 0), Err(SynthError::BadShots(3))));
    }

    #[test]
    fn episode_stream_is_reproducible() {
        let spec = target_b_domain();
        let a = sample_episode(&spec, 5, 99).unwrap();
        let b = sample_episode(&spec, 5, 99).unwrap();
        assert_eq!(a.class, b.class);
        for (x, y) in a.support.iter().zip(&b.support) {
            assert_eq!(x.image, y.image);
        }
        assert_eq!(a.query.image, b.query.image);
    }

    #[test]
    fn miou_counting_oracle_on_half_covered_foreground() {
        // 4x4 grid: true foreground is the top two rows (8 cells); the
        // prediction covers exactly half of it (top row) with no false
        // positives. The test recomputes both class IoUs by counting.
        let mut truth = Tensor::zeros(&[4, 4]);
        let mut pred = Tensor::zeros(&[4, 4]);
        for c in 0..4 {
            truth.set(&[0, c], 1.0);
            truth.set(&[1, c], 1.0);
            pred.set(&[0, c], 1.0);
        }
        let cells = 16;
        let fg_inter = 4;
        let fg_union = 8; // truth fg 8, pred fg 4, all predicted inside truth
        let bg_inter = cells - 8; // predicted bg contains every true bg cell
        let bg_union = cells - fg_inter;
        let fg_iou = fg_inter as f64 / fg_union as f64;
        let bg_iou = bg_inter as f64 / bg_union as f64;
        assert_eq!(fg_iou, 0.5);
        assert!((bg_iou - 2.0 / 3.0).abs() < 1e-15);
        let want = (fg_iou + bg_iou) / 2.0;
        assert!((want - 7.0 / 12.0).abs() < 1e-15);
        assert!((miou(&pred, &truth).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn miou_edge_cases() {
        let a = Tensor::zeros(&[4, 4]);
        assert_eq!(miou(&a, &a).unwrap(), 1.0); // foreground union empty
        let b = Tensor::full(&[4, 4], 1.0);
        assert_eq!(miou(&b, &b).unwrap(), 1.0);
        // complement prediction with both classes present: both IoUs are 0
        let mut half = Tensor::zeros(&[4, 4]);
        for c in 0..4 {
            half.set(&[0, c], 1.0);
            half.set(&[1, c], 1.0);
        }
        let mut inv = Tensor::zeros(&[4, 4]);
        for c in 0..4 {
            inv.set(&[2, c], 1.0);
            inv.set(&[3, c], 1.0);
        }
        assert_eq!(miou(&inv, &half).unwrap(), 0.0);
        assert!(miou(&a, &Tensor::zeros(&[2, 8])).is_err());

        let ms = [(&b, &b), (&a, &a)];
        assert_eq!(mean_miou(ms.iter().map(|&(p, t)| (p, t))).unwrap(), 1.0);
    }

    #[test]
    fn export_writes_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = source_domain();
        let path = export_domain(&spec, 3, 5, dir.path()).unwrap();
        let manifest: ExportManifest =
            serde_json::from_reader(File::open(&path).unwrap()).unwrap();
        assert_eq!(manifest.n, 3);
        assert_eq!(manifest.samples.len(), 3);
        for entry in &manifest.samples {
            let img = fdmp::load_tensor(dir.path().join(&entry.image)).unwrap();
            assert_eq!(img.dims(), &[CHANNELS, IMAGE_SIZE, IMAGE_SIZE]);
            let mask = fdmp::load_tensor(dir.path().join(&entry.mask)).unwrap();
            assert_eq!(mask.dims(), &[IMAGE_SIZE, IMAGE_SIZE]);
            // exported payload matches a fresh render of the recorded seed
            let class = spec
                .classes
                .iter()
                .copied()
                .find(|c| c.name() == entry.class)
                .unwrap();
            let re = render_sample(&spec, class, entry.seed).unwrap();
            assert_eq!(re.image, img);
        }
    }
}
