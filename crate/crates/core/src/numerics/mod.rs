//! Dense tensors, reverse-mode differentiation, finite-difference checking
//! and the optimiser shared by every other module.

mod attention;
mod gradcheck;
mod graph;
pub mod layers;
pub mod ops;
mod optim;
mod params;
mod rng;
mod tensor;

pub use attention::AttentionSpec;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Perturbation, Var};
pub use ops::{cosine_sim, cross_attention, layer_norm, matmul, softmax};
pub use optim::{AdamW, AdamWConfig, OneCycle};
pub use params::{ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::Tensor;

/// Default epsilon inside layer normalisation.
pub const LN_EPS: f64 = 1e-5;
