//! Post-training quantization of linear layers that jointly calibrates
//! structural residuals, balances activation and weight error with a
//! per-layer scale, and refines clipping bounds by gradient descent.
//!
//! The [`sr_eval`] module contains a small synthetic super-resolution
//! harness used to measure image quality after quantization.

pub mod cli;
pub mod error;
pub mod linalg;
pub mod pipeline;
pub mod projection;
pub mod quantizer;
pub mod refiner;
pub mod scale;
pub mod sr_eval;
pub mod src_calib;
pub mod stats;

pub use error::{HarmoqError, Result};
pub use linalg::Tensor2D;
pub use pipeline::{run_harmoq, Components, PipelineConfig, PipelineTrace, QuantizableModel, QuantizedModelState};
pub use projection::{make_projection, ProjectionKind, ProjectionMatrix, ProjectionRequest};
pub use quantizer::QuantizerConfig;
pub use refiner::{BitWidths, RefinerConfig};
pub use scale::{BoundarySet, LayerScale};
pub use src_calib::SrcConfig;
