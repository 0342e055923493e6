//! Desk-scale laboratory for studying transferable adversarial attacks
//! across quantized neural networks.
//!
//! The crate trains small quantized CNNs/MLPs at multiple bitwidths,
//! fine-tunes substitute models with an alternating multi-bitwidth
//! objective, generates transferable adversarial examples, and measures the
//! diagnostics (feature divergence, gradient alignment, loss sharpness)
//! that explain when and why examples transfer.
//!
//! # Modules
//!
//! - [`tensor`] -- dense tensors, f32 storage with an f64 verification mode
//! - [`quant`] -- uniform affine fake quantization with surrogate gradients
//! - [`nn`] -- layer-graph models and the reverse-mode engine
//! - [`train`] -- standard / quantization-aware / multi-bitwidth / robust training
//! - [`attack`] -- PGD, MIM, the state-alternating attack, and ensembles
//! - [`diag`] -- feature divergence, gradient alignment, sharpness, BN stats
//! - [`data`] -- synthetic blob datasets and the IDX binary reader
//! - [`model_io`] -- the "QAAM" model container
//! - [`report`] -- transfer-matrix evaluation and report writers
//! - [`experiment`] -- end-to-end experiment orchestration and manifests

pub mod attack;
pub mod cli;
pub mod data;
pub mod diag;
pub mod error;
pub mod experiment;
pub mod model_io;
pub mod nn;
pub mod quant;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Library version, from the crate manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
