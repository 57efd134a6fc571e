//! The segmentation model: frozen backbone taps, optional channel mixers,
//! masked-support correlation pyramid, and a small trainable encoder/decoder
//! producing query-mask logits.
//!
//! Support-side wiring at a tap with a mixer: the correlation branch sees
//! `mixer(mask . raw)` while the trunk continues with `mixer(raw)`, so
//! masking stays an episode-local operation and never leaks into deeper
//! backbone stages.

use crate::seeded::phase_rng;
use crate::synthbench::{miou, Episode, ShapeClass, IMAGE_SIZE};
use crate::tensor::fdmp;
use crate::tensor::{Graph, Tensor, Var};

use super::adapter::{init_mixer, AdapterDesign, AdapterSpec, Connection, InitScheme, Placement};
use super::backbone::{BackboneState, TAP_CHANNELS, TAP_SIDE};
use super::{resize_mask, NnError, Result};

const TAP_AREA: usize = TAP_SIDE * TAP_SIDE;
/// Channels produced by each per-level correlation conv.
const LEVEL_OUT: usize = 4;
/// Channels of the encoder output.
const ENC_OUT: usize = 8;
const DEC_MID: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Navigator,
    Encoder,
    Decoder,
}

#[derive(Debug, Clone)]
struct Mixer {
    site: MixerSite,
    weights: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MixerSite {
    Tap(usize),
    Encoder,
}

#[derive(Debug, Clone)]
struct EncoderParams {
    level_w: [Tensor; 3],
    level_b: [Tensor; 3],
    merge_w: Tensor,
    merge_b: Tensor,
}

#[derive(Debug, Clone)]
struct DecoderParams {
    d1_w: Tensor,
    d1_b: Tensor,
    d2_w: Tensor,
    d2_b: Tensor,
    d3_w: Tensor,
    d3_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    backbone: BackboneState,
    pub adapter: Option<AdapterSpec>,
    /// When set, mixers are bound as constants: they receive no gradients
    /// and optimizers must leave them untouched.
    pub adapter_frozen: bool,
    mixers: Vec<Mixer>,
    enc: EncoderParams,
    dec: DecoderParams,
}

/// One image's cached frozen activations. `deeper` holds taps 1 and 2 and is
/// absent when a trunk mixer below them forces in-graph recomputation.
#[derive(Debug, Clone)]
struct PreparedImage {
    t0: Tensor,
    deeper: Option<[Tensor; 2]>,
}

#[derive(Debug, Clone)]
struct PreparedSupport {
    image: PreparedImage,
    /// Support mask resized to the tap grid and binarized.
    mask8: Tensor,
}

/// An episode with all frozen-path work done up front.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub domain: String,
    pub class: ShapeClass,
    query: PreparedImage,
    supports: Vec<PreparedSupport>,
    pub query_mask: Tensor,
}

/// Graph bindings for every model parameter, in enumeration order. Entries
/// with `mask[i] == false` were bound as constants and carry no gradient.
pub struct BoundModel {
    pub all: Vec<Var>,
    pub mask: Vec<bool>,
    tap_mixers: [Option<Vec<Var>>; 3],
    enc_mixer: Option<Vec<Var>>,
    enc_level: Vec<(Var, Var)>,
    enc_merge: (Var, Var),
    dec: [(Var, Var); 3],
}

/// Pooled activations recorded during a forward pass, for representation
/// similarity probes.
#[derive(Debug, Clone)]
pub struct TapCapture {
    /// Mean-pooled deep backbone tap of the query (post-mixer if present).
    pub backbone: Vec<f64>,
    /// Mean-pooled encoder output (post-mixer if present).
    pub encoder: Vec<f64>,
}

pub struct EpisodeWiring {
    pub loss: Var,
    pub logits: Var,
    pub capture: Option<TapCapture>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub loss: f64,
    pub miou: f64,
    pub logits: Tensor,
}

impl Model {
    /// Builds a model around a frozen backbone. Head weights draw from a
    /// stream independent of the mixer stream, so two models with the same
    /// seed share head initialisation regardless of adapter choice.
    pub fn new(backbone: BackboneState, adapter: Option<AdapterSpec>, seed: u64) -> Result<Self> {
        backbone.verify_frozen()?;
        let mut head_rng = phase_rng(seed, "model-head-init");
        let gauss = |dims: &[usize], fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = dims.iter().product();
            Tensor::from_vec(dims, (0..n).map(|_| std * crate::seeded::normal(rng)).collect())
                .expect("head shape")
        };
        let enc = EncoderParams {
            level_w: std::array::from_fn(|_| gauss(&[LEVEL_OUT, 2, 3, 3], 2 * 9, &mut head_rng)),
            level_b: std::array::from_fn(|_| Tensor::zeros(&[LEVEL_OUT])),
            merge_w: gauss(&[ENC_OUT, 3 * LEVEL_OUT, 3, 3], 3 * LEVEL_OUT * 9, &mut head_rng),
            merge_b: Tensor::zeros(&[ENC_OUT]),
        };
        let dec = DecoderParams {
            d1_w: gauss(&[ENC_OUT, ENC_OUT, 3, 3], ENC_OUT * 9, &mut head_rng),
            d1_b: Tensor::zeros(&[ENC_OUT]),
            d2_w: gauss(&[DEC_MID, ENC_OUT, 3, 3], ENC_OUT * 9, &mut head_rng),
            d2_b: Tensor::zeros(&[DEC_MID]),
            d3_w: gauss(&[1, DEC_MID, 3, 3], DEC_MID * 9, &mut head_rng),
            d3_b: Tensor::zeros(&[1]),
        };
        let mut mixers = Vec::new();
        if let Some(spec) = adapter {
            let mut mix_rng = phase_rng(seed, "adapter-init");
            for &tap in spec.taps() {
                let weights = init_mixer(spec.design, TAP_CHANNELS[tap], spec.init, &mut mix_rng)?;
                mixers.push(Mixer { site: MixerSite::Tap(tap), weights });
            }
            if spec.on_encoder() {
                let weights = init_mixer(spec.design, ENC_OUT, spec.init, &mut mix_rng)?;
                mixers.push(Mixer { site: MixerSite::Encoder, weights });
            }
        }
        Ok(Self { backbone, adapter, adapter_frozen: false, mixers, enc, dec })
    }

    pub fn backbone(&self) -> &BackboneState {
        &self.backbone
    }

    /// Names, in the same order as [`Model::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for m in &self.mixers {
            let site = match m.site {
                MixerSite::Tap(t) => format!("adapter.tap{t}"),
                MixerSite::Encoder => "adapter.enc".into(),
            };
            for j in 0..m.weights.len() {
                names.push(format!("{site}.w{j}"));
            }
        }
        for l in 0..3 {
            names.push(format!("encoder.level{l}.w"));
            names.push(format!("encoder.level{l}.b"));
        }
        names.push("encoder.merge.w".into());
        names.push("encoder.merge.b".into());
        for part in ["d1", "d2", "d3"] {
            names.push(format!("decoder.{part}.w"));
            names.push(format!("decoder.{part}.b"));
        }
        names
    }

    /// Roles, in the same order as [`Model::params`].
    pub fn param_roles(&self) -> Vec<ParamRole> {
        let mut roles = Vec::new();
        for m in &self.mixers {
            roles.extend(std::iter::repeat(ParamRole::Navigator).take(m.weights.len()));
        }
        roles.extend(std::iter::repeat(ParamRole::Encoder).take(8));
        roles.extend(std::iter::repeat(ParamRole::Decoder).take(6));
        roles
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for m in &self.mixers {
            out.extend(m.weights.iter());
        }
        for l in 0..3 {
            out.push(&self.enc.level_w[l]);
            out.push(&self.enc.level_b[l]);
        }
        out.push(&self.enc.merge_w);
        out.push(&self.enc.merge_b);
        out.extend([
            &self.dec.d1_w,
            &self.dec.d1_b,
            &self.dec.d2_w,
            &self.dec.d2_b,
            &self.dec.d3_w,
            &self.dec.d3_b,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for m in &mut self.mixers {
            out.extend(m.weights.iter_mut());
        }
        for pair in self.enc.level_w.iter_mut().zip(self.enc.level_b.iter_mut()) {
            out.push(pair.0);
            out.push(pair.1);
        }
        out.push(&mut self.enc.merge_w);
        out.push(&mut self.enc.merge_b);
        out.extend([
            &mut self.dec.d1_w,
            &mut self.dec.d1_b,
            &mut self.dec.d2_w,
            &mut self.dec.d2_b,
            &mut self.dec.d3_w,
            &mut self.dec.d3_b,
        ]);
        out
    }

    /// Per-parameter trainability under a role filter, honouring
    /// `adapter_frozen`. Aligned with [`Model::params`].
    pub fn trainable_mask(&self, trainable: &dyn Fn(ParamRole) -> bool) -> Vec<bool> {
        self.param_roles()
            .iter()
            .map(|&r| {
                if r == ParamRole::Navigator && self.adapter_frozen {
                    false
                } else {
                    trainable(r)
                }
            })
            .collect()
    }

    /// Binds every parameter into `g`; entries failing the filter become
    /// constants. The returned structure drives all forward passes on `g`.
    pub fn bind(&self, g: &mut Graph, trainable: &dyn Fn(ParamRole) -> bool) -> BoundModel {
        let mask = self.trainable_mask(trainable);
        let mut all = Vec::with_capacity(mask.len());
        let mut idx = 0usize;
        let mut next = |g: &mut Graph, t: &Tensor| {
            let v = if mask[idx] { g.param(t) } else { g.constant(t) };
            idx += 1;
            all.push(v);
            v
        };
        let mut tap_mixers: [Option<Vec<Var>>; 3] = [None, None, None];
        let mut enc_mixer = None;
        for m in &self.mixers {
            let vars: Vec<Var> = m.weights.iter().map(|w| next(g, w)).collect();
            match m.site {
                MixerSite::Tap(t) => tap_mixers[t] = Some(vars),
                MixerSite::Encoder => enc_mixer = Some(vars),
            }
        }
        let enc_level: Vec<(Var, Var)> = (0..3)
            .map(|l| {
                let w = next(g, &self.enc.level_w[l]);
                let b = next(g, &self.enc.level_b[l]);
                (w, b)
            })
            .collect();
        let enc_merge = (next(g, &self.enc.merge_w), next(g, &self.enc.merge_b));
        let dec = [
            (next(g, &self.dec.d1_w), next(g, &self.dec.d1_b)),
            (next(g, &self.dec.d2_w), next(g, &self.dec.d2_b)),
            (next(g, &self.dec.d3_w), next(g, &self.dec.d3_b)),
        ];
        BoundModel { all, mask, tap_mixers, enc_mixer, enc_level, enc_merge, dec }
    }

    pub fn bind_all(&self, g: &mut Graph) -> BoundModel {
        self.bind(g, &|_| true)
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundModel {
        self.bind(g, &|_| false)
    }

    fn mixer_at_or_below(&self, tap: usize) -> bool {
        self.adapter.map_or(false, |a| a.taps().iter().any(|&t| t <= tap))
    }

    /// Runs every frozen computation an episode allows up front. Taps above
    /// a trunk mixer cannot be cached because their values depend on it.
    pub fn prepare(&self, ep: &Episode) -> Result<PreparedEpisode> {
        if ep.support.is_empty() || ep.support.len() > 5 {
            return Err(NnError::BadSupportCount(ep.support.len()));
        }
        let cache_deeper = !self.mixer_at_or_below(0);
        let prep = |image: &Tensor| -> Result<PreparedImage> {
            let t0 = self.backbone.stem(image)?;
            let deeper = if cache_deeper {
                let t1 = self.backbone.stage_after(0, &t0);
                let t2 = self.backbone.stage_after(1, &t1);
                Some([t1, t2])
            } else {
                None
            };
            Ok(PreparedImage { t0, deeper })
        };
        let query = prep(&ep.query.image)?;
        let mut supports = Vec::with_capacity(ep.support.len());
        for s in &ep.support {
            supports.push(PreparedSupport {
                image: prep(&s.image)?,
                mask8: resize_mask(&s.mask, TAP_SIDE, TAP_SIDE)?,
            });
        }
        Ok(PreparedEpisode {
            domain: ep.domain.clone(),
            class: ep.class,
            query,
            supports,
            query_mask: ep.query.mask.clone(),
        })
    }

    fn apply_mixer(
        &self,
        g: &mut Graph,
        x: Var,
        vars: &[Var],
    ) -> Result<Var> {
        let spec = self.adapter.ok_or(NnError::MissingAdapter)?;
        let mixed = match vars {
            [w] => g.conv1x1(x, *w)?,
            [down, up] => {
                let mid = g.conv1x1(x, *down)?;
                g.conv1x1(mid, *up)?
            }
            _ => return Err(NnError::Checkpoint("mixer has unexpected arity".into())),
        };
        Ok(match spec.connection {
            Connection::Residual => g.add(x, mixed)?,
            Connection::Serial => mixed,
        })
    }

    /// Tap values feeding the correlation pyramid for one image. With a
    /// support mask, branch values are mixed after masking while the trunk
    /// advances on unmasked mixed values.
    fn taps_in_graph(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        img: &PreparedImage,
        mask8: Option<&Tensor>,
    ) -> Result<[Var; 3]> {
        let mut branches = [Var::default(); 3];
        let mut carry = g.constant(&img.t0);
        for l in 0..3 {
            let raw = carry;
            let mixer = bound.tap_mixers[l].as_ref();
            let branch_src = match mask8 {
                Some(m) => {
                    let bcast = g.constant(&broadcast_mask(m, TAP_CHANNELS[l]));
                    g.mul(raw, bcast)?
                }
                None => raw,
            };
            branches[l] = match mixer {
                Some(vars) => self.apply_mixer(g, branch_src, vars)?,
                None => branch_src,
            };
            if l < 2 {
                let trunk_out = match (mixer, mask8) {
                    (Some(vars), Some(_)) => self.apply_mixer(g, raw, vars)?,
                    (Some(_), None) => branches[l],
                    (None, _) => raw,
                };
                carry = match (&img.deeper, self.mixer_at_or_below(l)) {
                    (Some(d), false) => g.constant(&d[l]),
                    _ => {
                        let (w, b, stride) = self.backbone.conv(l + 2);
                        let wv = g.constant(w);
                        let bv = g.constant(b);
                        let y = g.conv2d(trunk_out, wv, Some(bv), stride, 1)?;
                        g.relu(y)
                    }
                };
            }
        }
        Ok(branches)
    }

    /// Correlation map `[q,s]` over tap positions, relu-cosine per shot,
    /// averaged over shots.
    fn correlation_level(&self, g: &mut Graph, q: Var, supports: &[Var]) -> Result<Var> {
        let c = g.dims(q)[0];
        let qf = g.reshape(q, &[c, TAP_AREA])?;
        let qt = g.permute(qf, &[1, 0])?;
        let qn = g.row_normalize(qt)?;
        let mut acc: Option<Var> = None;
        for &s in supports {
            let sf = g.reshape(s, &[c, TAP_AREA])?;
            let st = g.permute(sf, &[1, 0])?;
            let sn = g.row_normalize(st)?;
            let snt = g.permute(sn, &[1, 0])?;
            let cos = g.matmul(qn, snt)?;
            let cor = g.relu(cos);
            acc = Some(match acc {
                Some(a) => g.add(a, cor)?,
                None => cor,
            });
        }
        let total = acc.expect("at least one support shot");
        Ok(g.scale(total, 1.0 / supports.len() as f64))
    }

    fn encode(&self, g: &mut Graph, bound: &BoundModel, cors: &[Var; 3]) -> Result<Var> {
        let pool = g.constant(&Tensor::full(&[TAP_AREA, 1], 1.0 / TAP_AREA as f64));
        let mut level_maps = Vec::with_capacity(3);
        for (l, &c) in cors.iter().enumerate() {
            let m1 = g.matmul(c, pool)?;
            let m1 = g.reshape(m1, &[TAP_SIDE, TAP_SIDE])?;
            let sq = g.mul(c, c)?;
            let m2 = g.matmul(sq, pool)?;
            let m2 = g.reshape(m2, &[TAP_SIDE, TAP_SIDE])?;
            let pooled = g.stack(&[m1, m2])?;
            let (w, b) = bound.enc_level[l];
            let y = g.conv2d(pooled, w, Some(b), 1, 1)?;
            level_maps.push(g.relu(y));
        }
        let cat = g.stack(&level_maps)?;
        let cat = g.reshape(cat, &[3 * LEVEL_OUT, TAP_SIDE, TAP_SIDE])?;
        let (w, b) = bound.enc_merge;
        let merged = g.conv2d(cat, w, Some(b), 1, 1)?;
        let mut e = g.relu(merged);
        if let Some(vars) = bound.enc_mixer.as_ref() {
            e = self.apply_mixer(g, e, vars)?;
        }
        Ok(e)
    }

    fn decode(&self, g: &mut Graph, bound: &BoundModel, e: Var) -> Result<Var> {
        let (w1, b1) = bound.dec[0];
        let x = g.conv2d(e, w1, Some(b1), 1, 1)?;
        let x = g.relu(x);
        let x = g.bilinear_resize(x, IMAGE_SIZE / 2, IMAGE_SIZE / 2)?;
        let (w2, b2) = bound.dec[1];
        let x = g.conv2d(x, w2, Some(b2), 1, 1)?;
        let x = g.relu(x);
        let x = g.bilinear_resize(x, IMAGE_SIZE, IMAGE_SIZE)?;
        let (w3, b3) = bound.dec[2];
        let x = g.conv2d(x, w3, Some(b3), 1, 1)?;
        Ok(g.reshape(x, &[IMAGE_SIZE, IMAGE_SIZE])?)
    }

    /// Wires one episode's loss into `g` using parameters bound by `bound`.
    pub fn episode_loss(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        ep: &PreparedEpisode,
        capture: bool,
    ) -> Result<EpisodeWiring> {
        let q_taps = self.taps_in_graph(g, bound, &ep.query, None)?;
        let mut s_taps: Vec<[Var; 3]> = Vec::with_capacity(ep.supports.len());
        for s in &ep.supports {
            s_taps.push(self.taps_in_graph(g, bound, &s.image, Some(&s.mask8))?);
        }
        let mut cors = [Var::default(); 3];
        for l in 0..3 {
            let shots: Vec<Var> = s_taps.iter().map(|t| t[l]).collect();
            cors[l] = self.correlation_level(g, q_taps[l], &shots)?;
        }
        let e = self.encode(g, bound, &cors)?;
        let logits = self.decode(g, bound, e)?;
        let target = g.constant(&ep.query_mask);
        let loss = g.bce_loss(logits, target)?;
        let capture = capture.then(|| TapCapture {
            backbone: mean_pool(g.value(q_taps[2]), TAP_CHANNELS[2], TAP_AREA),
            encoder: mean_pool(g.value(e), ENC_OUT, TAP_AREA),
        });
        Ok(EpisodeWiring { loss, logits, capture })
    }

    /// Mean episode loss over a batch sharing one set of bound parameters.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        eps: &[PreparedEpisode],
    ) -> Result<Var> {
        if eps.is_empty() {
            return Err(NnError::BadSupportCount(0));
        }
        let mut total: Option<Var> = None;
        for ep in eps {
            let w = self.episode_loss(g, bound, ep, false)?;
            total = Some(match total {
                Some(t) => g.add(t, w.loss)?,
                None => w.loss,
            });
        }
        Ok(g.scale(total.expect("non-empty batch"), 1.0 / eps.len() as f64))
    }

    /// Forward-only evaluation: loss, binary mask quality and raw logits.
    pub fn eval_episode(&self, ep: &PreparedEpisode) -> Result<EvalOutcome> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let w = self.episode_loss(&mut g, &bound, ep, false)?;
        let logits = g.tensor(w.logits);
        let pred = logits.map(|z| if z >= 0.0 { 1.0 } else { 0.0 });
        let quality = miou(&pred, &ep.query_mask)?;
        Ok(EvalOutcome { loss: g.value(w.loss)[0], miou: quality, logits })
    }

    /// Forward pass recording pooled probe activations, no loss consumers.
    pub fn capture_episode(&self, ep: &PreparedEpisode) -> Result<TapCapture> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let w = self.episode_loss(&mut g, &bound, ep, true)?;
        Ok(w.capture.expect("capture requested"))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut sections: Vec<(String, Tensor)> = vec![("meta.adapter".into(), self.meta_tensor())];
        for i in 0..self.backbone.conv_count() {
            let (w, b, _) = self.backbone.conv(i);
            sections.push((format!("backbone.conv{i}.w"), w.clone()));
            sections.push((format!("backbone.conv{i}.b"), b.clone()));
        }
        for (name, t) in self.param_names().into_iter().zip(self.params()) {
            sections.push((name, t.clone()));
        }
        let refs = sections.iter().map(|(n, t)| (n.as_str(), t));
        fdmp::save_sections(path, refs).map_err(NnError::Tensor)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let sections = fdmp::load_sections(path).map_err(NnError::Tensor)?;
        let find = |name: &str| {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| NnError::Checkpoint(format!("missing section {name}")))
        };
        let (adapter, frozen) = decode_meta(&find("meta.adapter")?)?;
        let mut convs = Vec::new();
        for i in 0..4 {
            convs.push((find(&format!("backbone.conv{i}.w"))?, find(&format!("backbone.conv{i}.b"))?));
        }
        let backbone = BackboneState::from_parts(convs)?;
        let mut model = Model::new(backbone, adapter, 0)?;
        model.adapter_frozen = frozen;
        let names = model.param_names();
        for (name, param) in names.iter().zip(model.params_mut()) {
            let stored = find(name)?;
            if stored.dims() != param.dims() {
                return Err(NnError::Checkpoint(format!("section {name} has wrong shape")));
            }
            *param = stored;
        }
        Ok(model)
    }

    fn meta_tensor(&self) -> Tensor {
        let mut v = vec![0.0; 7];
        if let Some(a) = self.adapter {
            v[0] = 1.0;
            let (design, rank) = match a.design {
                AdapterDesign::Conventional => (0.0, 0.0),
                AdapterDesign::LowRank { rank } => (1.0, rank as f64),
            };
            v[1] = design;
            v[2] = rank;
            v[3] = matches!(a.connection, Connection::Serial) as u8 as f64;
            v[4] = match a.placement {
                Placement::BackboneShallow => 0.0,
                Placement::BackboneDeep => 1.0,
                Placement::BetweenEncDec => 2.0,
                Placement::AllTaps => 3.0,
            };
            v[5] = match a.init {
                InitScheme::Zero => 0.0,
                InitScheme::Gaussian => 1.0,
                InitScheme::Kaiming => 2.0,
                InitScheme::Xavier => 3.0,
            };
        }
        v[6] = self.adapter_frozen as u8 as f64;
        Tensor::from_vec(&[7], v).expect("meta shape")
    }
}

fn decode_meta(t: &Tensor) -> Result<(Option<AdapterSpec>, bool)> {
    if t.dims() != [7] {
        return Err(NnError::Checkpoint("adapter metadata has wrong shape".into()));
    }
    let v = t.data();
    let frozen = v[6] != 0.0;
    if v[0] == 0.0 {
        return Ok((None, frozen));
    }
    let design = if v[1] == 0.0 {
        AdapterDesign::Conventional
    } else {
        AdapterDesign::LowRank { rank: v[2] as usize }
    };
    let connection = if v[3] == 0.0 { Connection::Residual } else { Connection::Serial };
    let placement = match v[4] as usize {
        0 => Placement::BackboneShallow,
        1 => Placement::BackboneDeep,
        2 => Placement::BetweenEncDec,
        3 => Placement::AllTaps,
        _ => return Err(NnError::Checkpoint("bad placement tag".into())),
    };
    let init = match v[5] as usize {
        0 => InitScheme::Zero,
        1 => InitScheme::Gaussian,
        2 => InitScheme::Kaiming,
        3 => InitScheme::Xavier,
        _ => return Err(NnError::Checkpoint("bad init tag".into())),
    };
    Ok((Some(AdapterSpec { design, connection, placement, init }), frozen))
}

fn broadcast_mask(mask8: &Tensor, c: usize) -> Tensor {
    let hw = mask8.data().len();
    let mut out = Vec::with_capacity(c * hw);
    for _ in 0..c {
        out.extend_from_slice(mask8.data());
    }
    Tensor::from_vec(&[c, TAP_SIDE, TAP_SIDE], out).expect("mask broadcast shape")
}

fn mean_pool(vals: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c).map(|ch| vals[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

/// Relu-cosine correlation between all position pairs of two equally shaped
/// feature maps; rows index `q` positions, columns `s` positions. Positions
/// with norm below 1e-12 correlate to zero.
pub fn correlation4d(q: &Tensor, s: &Tensor) -> Result<Tensor> {
    if q.ndim() != 3 || q.dims() != s.dims() {
        return Err(NnError::Tensor(crate::tensor::TensorError::ShapeMismatch {
            op: "correlation4d",
            expected: q.dims().to_vec(),
            got: s.dims().to_vec(),
        }));
    }
    let (c, h, w) = (q.dims()[0], q.dims()[1], q.dims()[2]);
    let hw = h * w;
    let col = |t: &Tensor, i: usize| -> Vec<f64> { (0..c).map(|ch| t.data()[ch * hw + i]).collect() };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = vec![0.0; hw * hw];
    for m in 0..hw {
        let qa = col(q, m);
        let qn = norm(&qa);
        if qn < 1e-12 {
            continue;
        }
        for n in 0..hw {
            let sa = col(s, n);
            let sn = norm(&sa);
            if sn < 1e-12 {
                continue;
            }
            let dot: f64 = qa.iter().zip(&sa).map(|(a, b)| a * b).sum();
            out[m * hw + n] = (dot / (qn * sn)).max(0.0);
        }
    }
    Ok(Tensor::from_vec(&[hw, hw], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::{sample_episode, source_domain, target_a_domain};

    fn frozen_backbone(seed: u64) -> BackboneState {
        let mut b = BackboneState::init(seed);
        b.freeze();
        b
    }

    fn episode(seed: u64) -> Episode {
        sample_episode(&source_domain(), 1, seed).unwrap()
    }

    #[test]
    fn correlation4d_is_bounded_and_transposes() {
        let mut rng = phase_rng(0, "c4d");
        let q = Tensor::from_vec(&[3, 2, 2], (0..12).map(|_| crate::seeded::normal(&mut rng)).collect()).unwrap();
        let s = Tensor::from_vec(&[3, 2, 2], (0..12).map(|_| crate::seeded::normal(&mut rng)).collect()).unwrap();
        let qs = correlation4d(&q, &s).unwrap();
        let sq = correlation4d(&s, &q).unwrap();
        for m in 0..4 {
            for n in 0..4 {
                let v = qs.at(&[m, n]);
                assert!((0.0..=1.0 + 1e-12).contains(&v));
                assert!((v - sq.at(&[n, m])).abs() < 1e-12);
            }
        }
        // self-correlation diagonal is exactly one for nonzero columns
        let qq = correlation4d(&q, &q).unwrap();
        for m in 0..4 {
            assert!((qq.at(&[m, m]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation4d_zero_norm_positions_give_zero() {
        let q = Tensor::zeros(&[2, 2, 2]);
        let s = Tensor::full(&[2, 2, 2], 1.0);
        let out = correlation4d(&q, &s).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_is_deterministic() {
        let model = Model::new(frozen_backbone(3), Some(AdapterSpec::full()), 4).unwrap();
        let ep = model.prepare(&episode(9)).unwrap();
        let a = model.eval_episode(&ep).unwrap();
        let b = model.eval_episode(&ep).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.loss, b.loss);
        assert!(a.loss.is_finite());
        assert!((0.0..=1.0).contains(&a.miou));
    }

    #[test]
    fn zero_residual_adapter_is_transparent() {
        // zero-filled residual mixers must leave logits bit-identical to the
        // adapter-free model built from the same seed
        let base = Model::new(frozen_backbone(5), None, 7).unwrap();
        for placement in [
            Placement::BackboneShallow,
            Placement::BackboneDeep,
            Placement::BetweenEncDec,
            Placement::AllTaps,
        ] {
            let spec = AdapterSpec {
                design: AdapterDesign::Conventional,
                connection: Connection::Residual,
                placement,
                init: InitScheme::Zero,
            };
            let wrapped = Model::new(frozen_backbone(5), Some(spec), 7).unwrap();
            let ep_b = base.prepare(&episode(2)).unwrap();
            let ep_w = wrapped.prepare(&episode(2)).unwrap();
            assert_eq!(
                base.eval_episode(&ep_b).unwrap().logits,
                wrapped.eval_episode(&ep_w).unwrap().logits,
                "placement {placement} not transparent"
            );
        }
    }

    #[test]
    fn nonzero_mixer_changes_logits() {
        let base = Model::new(frozen_backbone(5), None, 7).unwrap();
        let wrapped = Model::new(frozen_backbone(5), Some(AdapterSpec::deep_residual()), 7).unwrap();
        let ep_b = base.prepare(&episode(2)).unwrap();
        let ep_w = wrapped.prepare(&episode(2)).unwrap();
        assert_ne!(base.eval_episode(&ep_b).unwrap().logits, wrapped.eval_episode(&ep_w).unwrap().logits);
    }

    #[test]
    fn zero_support_mask_makes_logits_query_independent() {
        // an all-zero support mask blanks every support feature, so all
        // correlations vanish and logits collapse to the head's bias response
        let model = Model::new(frozen_backbone(1), None, 2).unwrap();
        let mut e1 = episode(10);
        let mut e2 = episode(11);
        assert_ne!(e1.query.image, e2.query.image);
        e1.support[0].mask = Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE]);
        e2.support[0].mask = Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE]);
        let p1 = model.prepare(&e1).unwrap();
        let p2 = model.prepare(&e2).unwrap();
        let l1 = model.eval_episode(&p1).unwrap().logits;
        let l2 = model.eval_episode(&p2).unwrap().logits;
        assert_eq!(l1, l2);
        assert!(l1.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn five_shot_identical_supports_match_one_shot() {
        // averaging five identical support correlations is the identity
        let model = Model::new(frozen_backbone(2), Some(AdapterSpec::deep_residual()), 3).unwrap();
        let one = episode(4);
        let mut five = one.clone();
        five.support = vec![one.support[0].clone(); 5];
        let p1 = model.prepare(&one).unwrap();
        let p5 = model.prepare(&five).unwrap();
        let a = model.eval_episode(&p1).unwrap();
        let b = model.eval_episode(&p5).unwrap();
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn param_enumeration_is_consistent() {
        for spec in [None, Some(AdapterSpec::full()), Some(AdapterSpec {
            design: AdapterDesign::LowRank { rank: 4 },
            connection: Connection::Serial,
            placement: Placement::BetweenEncDec,
            init: InitScheme::Kaiming,
        })] {
            let mut model = Model::new(frozen_backbone(1), spec, 1).unwrap();
            let names = model.param_names();
            let roles = model.param_roles();
            let n = model.params().len();
            assert_eq!(names.len(), n);
            assert_eq!(roles.len(), n);
            assert_eq!(model.params_mut().len(), n);
            let mut uniq = names.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), n, "duplicate parameter names");
            let expected_mixers = spec.map_or(0, |s| {
                s.mixer_count() * match s.design {
                    AdapterDesign::Conventional => 1,
                    AdapterDesign::LowRank { .. } => 2,
                }
            });
            assert_eq!(roles.iter().filter(|&&r| r == ParamRole::Navigator).count(), expected_mixers);
        }
    }

    #[test]
    fn frozen_adapter_masks_navigator_params() {
        let mut model = Model::new(frozen_backbone(1), Some(AdapterSpec::full()), 1).unwrap();
        model.adapter_frozen = true;
        let mask = model.trainable_mask(&|_| true);
        for (m, r) in mask.iter().zip(model.param_roles()) {
            assert_eq!(*m, r != ParamRole::Navigator);
        }
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_eval() {
        let model = Model::new(frozen_backbone(6), Some(AdapterSpec::full()), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fdmp");
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(model.adapter, loaded.adapter);
        let ep = sample_episode(&target_a_domain(), 5, 3).unwrap();
        let p = model.prepare(&ep).unwrap();
        let q = loaded.prepare(&ep).unwrap();
        assert_eq!(model.eval_episode(&p).unwrap().logits, loaded.eval_episode(&q).unwrap().logits);
    }

    #[test]
    fn gradients_flow_to_all_trainable_params() {
        let model = Model::new(frozen_backbone(4), Some(AdapterSpec::full()), 5).unwrap();
        let ep = model.prepare(&episode(6)).unwrap();
        let mut g = Graph::new();
        let bound = model.bind_all(&mut g);
        let w = model.episode_loss(&mut g, &bound, &ep, false).unwrap();
        g.backward(w.loss).unwrap();
        for (i, &v) in bound.all.iter().enumerate() {
            let grad = g.grad(v).expect("trainable leaf must have a gradient");
            assert!(
                grad.iter().any(|&x| x != 0.0),
                "parameter {} received an all-zero gradient",
                model.param_names()[i]
            );
        }
    }
}
