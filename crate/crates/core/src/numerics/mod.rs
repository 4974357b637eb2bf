//! Dense `f64` tensors, a small op graph with reverse-mode gradients, and
//! seeded dropout.

mod autodiff;
mod graph;
mod kernels;
mod params;
pub mod random;
mod tensor;

pub use autodiff::{
    backward, evaluate, evaluate_with_gradients, forward, grad_check, numeric_partial, Evaluation,
};
pub use graph::{Graph, NodeId, Op};
pub use params::ParamSet;
pub use random::{derive_seed, dropout, rng_for};
pub use tensor::Tensor;
