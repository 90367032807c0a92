//! Evolutionary search over encoder-decoder architectures used as
//! deep image priors for single-image restoration.

pub mod archgraph;
pub mod autodiff;
pub mod dip;
pub mod evolve;
pub mod fleet;
pub mod genome;
pub mod quality;
