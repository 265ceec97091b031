//! Numeric substrate: tensors, seeded RNG, softmax, empirical histograms.

mod histogram;
mod rng;
mod tensor;

pub use histogram::{wasserstein1, wasserstein1_normalized, Histogram};
pub use rng::Rng;
pub use tensor::{matmul, softmax, Tensor};
