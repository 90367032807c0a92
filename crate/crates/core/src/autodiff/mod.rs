//! Minimal deterministic tensor runtime with reverse-mode gradients for the
//! layer graphs produced by [`crate::archgraph`], plus ADAM.

mod exec;
pub mod ops;
mod params;
mod tensor;

pub use exec::{backward, forward, ExecError, Tape};
pub use ops::{masked_loss, resize_bilinear, resize_bilinear_backward, LossNorm, NORM_EPS};
pub use params::{
    init_bound, NodeParams, Param, ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
pub use tensor::{Real, Tensor};

/// Initializes parameters for `graph`, reproducibly per seed.
pub fn init_params<T: Real>(graph: &crate::archgraph::ArchitectureGraph, seed: u64) -> ParamStore<T> {
    ParamStore::init(graph, seed)
}
