//! Learned block-based compressive image sensing with a dual-stem
//! (convolutional + windowed transformer) reconstruction network.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`autograd`], [`ops`], [`gradcheck`]: a small `f64` tensor
//!   library with tape-based reverse-mode differentiation.
//! * [`sampling`], [`projections`], [`cnn_stem`], [`transformer`]: the
//!   network components.
//! * [`pipeline`]: patch handling, the end-to-end model and its loss.
//! * [`harness`]: training, evaluation, metrics, image I/O and checkpoints.

pub mod autograd;
pub mod cnn_stem;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod projections;
pub mod sampling;
pub mod tensor;
pub mod transformer;

pub use autograd::{Gradients, Tape, Var};
pub use config::{AttentionProjection, FusionMode, LossTarget, ModelConfig};
pub use error::{Error, Result};
pub use pipeline::{CsFormer, Mode, ReconstructionResult};
pub use tensor::Tensor;
