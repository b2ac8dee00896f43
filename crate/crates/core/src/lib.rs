//! Randomization sanity checks for saliency methods.
//!
//! The crate bundles a small `f64` neural-network engine with reverse-mode
//! autodiff, the saliency methods under test, the similarity metrics used to
//! compare maps, and the randomization harnesses that tie them together.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod report;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod training;

pub use autodiff::{finite_difference_gradient, BackpropMode, Gradients, NodeId, Padding, Tape};
pub use error::{Error, Result};
pub use models::{ArchitectureId, LayerKind, LayerSpec, Model, Scale};
pub use tensor::Tensor;
