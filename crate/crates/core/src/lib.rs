//! Dense f64 tensors with reverse-mode autodiff, a small few-shot segmentation
//! model family built on them, sharpness-aware optimizers, and the
//! representation-similarity metrics used to study them.
//!
//! Everything is CPU-only and deterministic: every stochastic routine takes an
//! explicit seed or a caller-owned RNG, and no global state is consulted.

pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod seeded;
pub mod synthbench;
pub mod tensor;

pub use tensor::{fnv1a64, Graph, Tensor, TensorError, Var};
