//! Four-layer conv backbone pretrained on a shape-classification pretext
//! task, then frozen. Exposes three feature taps (after layers 2, 3 and 4),
//! all at the same 8x8 spatial resolution so correlation levels align.

use rand::Rng;

use crate::seeded::{normal, phase_rng, subseed};
use crate::synthbench::{render_sample, source_domain, IMAGE_SIZE};
use crate::tensor::kernels::{conv2d_fwd, ConvGeom};
use crate::tensor::{Graph, Tensor, Var};

use super::{NnError, Result};

/// Spatial side of every tap.
pub const TAP_SIDE: usize = 8;
/// Channel widths of the three taps.
pub const TAP_CHANNELS: [usize; 3] = [8, 16, 32];
/// Width of the pretext classification head: the full shape vocabulary, so
/// class ids stay stable across domains.
pub const PRETEXT_CLASSES: usize = 5;

/// (out channels, in channels, stride); all kernels 3x3 with padding 1.
const CONV_SPECS: [(usize, usize, usize); 4] = [(8, 3, 2), (8, 8, 2), (16, 8, 1), (32, 16, 1)];
const KERNEL: usize = 3;
const PAD: usize = 1;

/// Frozen backbone weights. Tap `l` is the relu output of conv `l + 1`;
/// conv 0 and conv 1 form the stem below the first tap.
#[derive(Debug, Clone)]
pub struct BackboneState {
    convs: Vec<(Tensor, Tensor)>,
    checksums: Vec<u64>,
}

impl BackboneState {
    /// Randomly initialised, unfrozen backbone.
    pub fn init(seed: u64) -> Self {
        let mut rng = phase_rng(seed, "backbone-init");
        let convs = CONV_SPECS
            .iter()
            .map(|&(co, ci, _)| {
                let std = (2.0 / (ci * KERNEL * KERNEL) as f64).sqrt();
                let w = Tensor::from_vec(
                    &[co, ci, KERNEL, KERNEL],
                    (0..co * ci * KERNEL * KERNEL).map(|_| std * normal(&mut rng)).collect(),
                )
                .expect("conv weight shape");
                (w, Tensor::zeros(&[co]))
            })
            .collect();
        Self { convs, checksums: Vec::new() }
    }

    pub fn conv_count(&self) -> usize {
        self.convs.len()
    }

    /// Weight, bias and stride of conv `i`.
    pub fn conv(&self, i: usize) -> (&Tensor, &Tensor, usize) {
        let (w, b) = &self.convs[i];
        (w, b, CONV_SPECS[i].2)
    }

    fn conv_mut(&mut self) -> &mut [(Tensor, Tensor)] {
        &mut self.convs
    }

    /// Records checksums of every parameter; later drift is detectable.
    pub fn freeze(&mut self) {
        self.checksums = self
            .convs
            .iter()
            .flat_map(|(w, b)| [w.checksum(), b.checksum()])
            .collect();
    }

    pub fn is_frozen(&self) -> bool {
        !self.checksums.is_empty()
    }

    pub fn verify_frozen(&self) -> Result<()> {
        if self.checksums.is_empty() {
            return Err(NnError::Checkpoint("backbone was never frozen".into()));
        }
        for (i, (w, b)) in self.convs.iter().enumerate() {
            if w.checksum() != self.checksums[2 * i] {
                return Err(NnError::FrozenDrift { index: 2 * i });
            }
            if b.checksum() != self.checksums[2 * i + 1] {
                return Err(NnError::FrozenDrift { index: 2 * i + 1 });
            }
        }
        Ok(())
    }

    fn relu_conv(&self, i: usize, x: &Tensor) -> Tensor {
        let (w, b, stride) = self.conv(i);
        let d = x.dims();
        let geom = ConvGeom {
            n: 1,
            ci: d[0],
            h: d[1],
            w: d[2],
            co: w.dims()[0],
            kh: KERNEL,
            kw: KERNEL,
            stride,
            pad: PAD,
        };
        let mut out = vec![0.0; geom.out_len()];
        conv2d_fwd(geom, x.data(), w.data(), Some(b.data()), &mut out);
        for v in &mut out {
            *v = v.max(0.0);
        }
        Tensor::from_vec(&[geom.co, geom.out_h(), geom.out_w()], out).expect("conv output shape")
    }

    /// Stem below the first tap: conv 0 and conv 1 on a `[3,32,32]` image.
    pub fn stem(&self, image: &Tensor) -> Result<Tensor> {
        if image.dims() != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(NnError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "backbone stem",
                expected: vec![3, IMAGE_SIZE, IMAGE_SIZE],
                got: image.dims().to_vec(),
            }));
        }
        Ok(self.relu_conv(1, &self.relu_conv(0, image)))
    }

    /// The single stage between tap `l` and tap `l + 1` (`l` in 0..2).
    pub fn stage_after(&self, tap: usize, input: &Tensor) -> Tensor {
        assert!(tap < 2, "no stage above the last tap");
        self.relu_conv(tap + 2, input)
    }

    /// All three tap activations for one image, fully frozen path.
    pub fn features(&self, image: &Tensor) -> Result<[Tensor; 3]> {
        let t0 = self.stem(image)?;
        let t1 = self.stage_after(0, &t0);
        let t2 = self.stage_after(1, &t1);
        Ok([t0, t1, t2])
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let sections: Vec<(String, Tensor)> = self
            .convs
            .iter()
            .enumerate()
            .flat_map(|(i, (w, b))| {
                [(format!("conv{i}.w"), w.clone()), (format!("conv{i}.b"), b.clone())]
            })
            .collect();
        let refs = sections.iter().map(|(n, t)| (n.as_str(), t));
        crate::tensor::fdmp::save_sections(path, refs).map_err(NnError::Tensor)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let sections = crate::tensor::fdmp::load_sections(path).map_err(NnError::Tensor)?;
        let mut convs = Vec::with_capacity(CONV_SPECS.len());
        for i in 0..CONV_SPECS.len() {
            let find = |name: &str| {
                sections
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| NnError::Checkpoint(format!("missing section {name}")))
            };
            convs.push((find(&format!("conv{i}.w"))?, find(&format!("conv{i}.b"))?));
        }
        Self::from_parts(convs)
    }

    /// Assembles a frozen backbone from conv weight/bias pairs.
    pub fn from_parts(convs: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if convs.len() != CONV_SPECS.len() {
            return Err(NnError::Checkpoint(format!("expected 4 convs, got {}", convs.len())));
        }
        for (i, ((w, b), &(co, ci, _))) in convs.iter().zip(&CONV_SPECS).enumerate() {
            if w.dims() != [co, ci, KERNEL, KERNEL] || b.dims() != [co] {
                return Err(NnError::Checkpoint(format!("conv{i} has wrong shape")));
            }
        }
        let mut state = Self { convs, checksums: Vec::new() };
        state.freeze();
        Ok(state)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 240, batch: 32, lr: 3e-3, eval_samples: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub accuracy: f64,
}

/// Trains the backbone on source-domain shape classification (global average
/// pool over the last tap, linear head, softmax cross-entropy), evaluates
/// held-out accuracy, discards the head and freezes the weights.
pub fn pretrain_backbone(cfg: &PretrainConfig, seed: u64) -> Result<(BackboneState, PretrainReport)> {
    let mut state = BackboneState::init(subseed(seed, "backbone-weights"));
    let domain = source_domain();
    let mut head_rng = phase_rng(seed, "backbone-head");
    let hw = TAP_SIDE * TAP_SIDE;
    let std = (2.0 / TAP_CHANNELS[2] as f64).sqrt();
    let mut head_w = Tensor::from_vec(
        &[TAP_CHANNELS[2], PRETEXT_CLASSES],
        (0..TAP_CHANNELS[2] * PRETEXT_CLASSES).map(|_| std * normal(&mut head_rng)).collect(),
    )?;
    let mut head_b = Tensor::zeros(&[1, PRETEXT_CLASSES]);

    let mut batch_rng = phase_rng(seed, "backbone-batches");
    let mut adam = crate::optim::AdamState::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut images = Vec::with_capacity(cfg.batch * 3 * IMAGE_SIZE * IMAGE_SIZE);
        let mut labels = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let class = domain.classes[batch_rng.gen_range(0..domain.classes.len())];
            let sample = render_sample(&domain, class, batch_rng.gen())?;
            images.extend_from_slice(sample.image.data());
            labels.push(class.id());
        }
        let batch = Tensor::from_vec(&[cfg.batch, 3, IMAGE_SIZE, IMAGE_SIZE], images)?;

        let mut g = Graph::new();
        let x = g.constant(&batch);
        let mut leaves: Vec<Var> = Vec::new();
        let mut cur = x;
        for i in 0..state.conv_count() {
            let (w, b, stride) = state.conv(i);
            let wv = g.param(w);
            let bv = g.param(b);
            leaves.push(wv);
            leaves.push(bv);
            cur = g.conv2d(cur, wv, Some(bv), stride, PAD)?;
            cur = g.relu(cur);
        }
        let pooled = gap_batched(&mut g, cur, cfg.batch, TAP_CHANNELS[2], hw)?;
        let wv = g.param(&head_w);
        let bv = g.param(&head_b);
        leaves.push(wv);
        leaves.push(bv);
        let raw = g.matmul(pooled, wv)?;
        let ones = g.constant(&Tensor::full(&[cfg.batch, 1], 1.0));
        let bias = g.matmul(ones, bv)?;
        let logits = g.add(raw, bias)?;
        let loss = g.softmax_ce(logits, &labels)?;
        losses.push(g.value(loss)[0]);
        g.backward(loss)?;

        let grads: Vec<Option<Tensor>> = leaves.iter().map(|&v| g.grad_tensor(v)).collect();
        let mut params: Vec<&mut Tensor> = Vec::new();
        for (w, b) in state.conv_mut() {
            params.push(w);
            params.push(b);
        }
        params.push(&mut head_w);
        params.push(&mut head_b);
        adam.step(&mut params, &grads).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    }

    let mut eval_rng = phase_rng(seed, "backbone-eval");
    let mut hits = 0usize;
    for _ in 0..cfg.eval_samples {
        let class = domain.classes[eval_rng.gen_range(0..domain.classes.len())];
        let sample = render_sample(&domain, class, eval_rng.gen())?;
        let taps = state.features(&sample.image)?;
        let mut pooled = vec![0.0; TAP_CHANNELS[2]];
        for c in 0..TAP_CHANNELS[2] {
            pooled[c] = taps[2].data()[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let mut best = (f64::NEG_INFINITY, 0usize);
        for k in 0..PRETEXT_CLASSES {
            let z: f64 = (0..TAP_CHANNELS[2]).map(|c| pooled[c] * head_w.at(&[c, k])).sum::<f64>()
                + head_b.at(&[0, k]);
            if z > best.0 {
                best = (z, k);
            }
        }
        if best.1 == class.id() {
            hits += 1;
        }
    }

    state.freeze();
    let report = PretrainReport { losses, accuracy: hits as f64 / cfg.eval_samples as f64 };
    Ok((state, report))
}

/// Global average pool of a batched map `[n,c,h*w spatial]` down to `[n,c]`.
fn gap_batched(g: &mut Graph, x: Var, n: usize, c: usize, hw: usize) -> Result<Var> {
    let flat = g.reshape(x, &[n * c, hw])?;
    let avg = g.constant(&Tensor::full(&[hw, 1], 1.0 / hw as f64));
    let pooled = g.matmul(flat, avg)?;
    Ok(g.reshape(pooled, &[n, c])?)
}
