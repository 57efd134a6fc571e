//! Few-shot segmentation model family: a frozen multi-stage conv backbone,
//! optional channel-mixing adapters at configurable attachment points, and a
//! small trainable correlation encoder/decoder head.
//!
//! An adapter attached at a backbone tap is inline in the trunk: its output
//! feeds both that tap's correlation level and the next backbone stage, so
//! attaching shallow perturbs everything downstream while the between-
//! encoder-decoder position leaves backbone activations untouched.

pub mod adapter;
pub mod backbone;
pub mod model;

use thiserror::Error;

use crate::synthbench::SynthError;
use crate::tensor::kernels::bilinear_fwd;
use crate::tensor::{Tensor, TensorError};

pub use adapter::{AdapterDesign, AdapterSpec, Connection, InitScheme, Placement};
pub use backbone::{pretrain_backbone, BackboneState, PretrainConfig, PretrainReport};
pub use model::{
    correlation4d, BoundModel, EpisodeWiring, EvalOutcome, Model, ParamRole, PreparedEpisode,
    TapCapture,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("support mask must be binary, found {0}")]
    NonBinaryMask(f64),
    #[error("channel mismatch: adapter expects {expected}, feature has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("lora rank {rank} must be positive and below the channel count {channels}")]
    BadLoraRank { rank: usize, channels: usize },
    #[error("frozen backbone parameter {index} changed (checksum drift)")]
    FrozenDrift { index: usize },
    #[error("model has no adapter")]
    MissingAdapter,
    #[error("episode must carry 1 to 5 support shots, got {0}")]
    BadSupportCount(usize),
    #[error("correlation pyramid has {got} levels, model expects {expected}")]
    LevelMismatch { expected: usize, got: usize },
    #[error("checkpoint malformed: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Bilinearly resizes a binary mask to `h x w` and re-binarizes at 0.5.
/// Errors if the input mask is not exactly {0,1}-valued.
pub fn resize_mask(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if mask.ndim() != 2 {
        return Err(NnError::Tensor(TensorError::BadRank {
            op: "resize_mask",
            got: mask.ndim(),
        }));
    }
    if let Some(&bad) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(NnError::NonBinaryMask(bad));
    }
    let (mh, mw) = (mask.dims()[0], mask.dims()[1]);
    let mut out = vec![0.0; h * w];
    bilinear_fwd(mask.data(), 1, mh, mw, h, w, &mut out);
    for v in &mut out {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    Ok(Tensor::from_vec(&[h, w], out)?)
}

/// Masks a support feature map: the mask is resized to the feature's spatial
/// size, binarized, broadcast along channels, and applied elementwise.
pub fn mask_support(features: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if features.ndim() != 3 {
        return Err(NnError::Tensor(TensorError::BadRank {
            op: "mask_support",
            got: features.ndim(),
        }));
    }
    let (c, h, w) = (features.dims()[0], features.dims()[1], features.dims()[2]);
    let m = resize_mask(mask, h, w)?;
    let mut out = features.data().to_vec();
    for ch in 0..c {
        for i in 0..h * w {
            out[ch * h * w + i] *= m.data()[i];
        }
    }
    Ok(Tensor::from_vec(&[c, h, w], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_mask_is_identity() {
        let f = Tensor::from_vec(&[2, 2, 2], (0..8).map(|x| x as f64 - 3.0).collect()).unwrap();
        let m = Tensor::full(&[32, 32], 1.0);
        assert_eq!(mask_support(&f, &m).unwrap(), f);
    }

    #[test]
    fn all_zeros_mask_blanks_features() {
        let f = Tensor::full(&[3, 4, 4], 2.5);
        let m = Tensor::zeros(&[32, 32]);
        let out = mask_support(&f, &m).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_resolution_checkerboard_is_exact_hadamard() {
        // no resize: mask resolution equals feature resolution, so the
        // masked output must be the plain elementwise product
        let h = 4;
        let mut mask = Tensor::zeros(&[h, h]);
        for r in 0..h {
            for c in 0..h {
                if (r + c) % 2 == 0 {
                    mask.set(&[r, c], 1.0);
                }
            }
        }
        let f = Tensor::from_vec(&[2, h, h], (0..32).map(|x| x as f64 * 0.3 - 4.0).collect()).unwrap();
        let out = mask_support(&f, &mask).unwrap();
        for ch in 0..2 {
            for r in 0..h {
                for c in 0..h {
                    let want = f.at(&[ch, r, c]) * mask.at(&[r, c]);
                    assert_eq!(out.at(&[ch, r, c]), want);
                }
            }
        }
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let f = Tensor::zeros(&[1, 2, 2]);
        let m = Tensor::full(&[4, 4], 0.7);
        assert!(matches!(mask_support(&f, &m), Err(NnError::NonBinaryMask(v)) if v == 0.7));
    }

    #[test]
    fn shrinking_the_mask_never_grows_feature_magnitude() {
        let f = Tensor::from_vec(&[2, 4, 4], (0..32).map(|x| (x as f64 - 16.0) * 0.4).collect()).unwrap();
        let mut wide = Tensor::zeros(&[4, 4]);
        for r in 0..4 {
            for c in 0..4 {
                if r < 3 {
                    wide.set(&[r, c], 1.0);
                }
            }
        }
        let mut narrow = wide.clone();
        for c in 0..4 {
            narrow.set(&[1, c], 0.0);
        }
        let a = mask_support(&f, &wide).unwrap();
        let b = mask_support(&f, &narrow).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(y.abs() <= x.abs() + 1e-15);
        }
    }
}
