//! Segmentation network with self-adaptive convolution kernel selection.
//!
//! The network derives candidate convolution kernel sizes from a dataset
//! fingerprint (quartile statistics of per-class area proportions) and learns
//! which candidate to deploy at each site by backpropagation. The crate ships
//! the fingerprinting engine, the full encoder/bridge/decoder model on an
//! f64 autodiff core, a synthetic dataset generator, segmentation metrics,
//! and a training/evaluation CLI.

pub mod adaptive_conv;
mod attention;
pub mod bridge;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod fingerprint;
pub mod metrics;
pub mod model;
pub mod nn;
mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attention::materialize_attention;
pub use fingerprint::{Fingerprint, KernelCandidateMatrix};
pub use model::{Guidance, Msa2Net};
pub use train::{Checkpoint, RunConfig};
