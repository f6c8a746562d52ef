//! Minimal f64 neural-network toolkit: tensors, a gradient tape, layer
//! descriptions, Adam, finite-difference gradient checking and checkpoints.
//!
//! Everything is reverse-mode: a forward pass records operations on a
//! [`Tape`], `Tape::backward` walks the recording once and accumulates
//! gradients for every leaf. There is no graph compiler and no view
//! machinery — tensors are dense row-major `Vec<f64>` buffers, which is
//! plenty for the desk-scale networks trained here.

mod adam;
mod checkpoint;
mod conv;
mod init;
mod network;
mod tape;
mod tensor;

pub use adam::Adam;
pub use checkpoint::{load_params, read_section, save_params, write_section, CHECKPOINT_VERSION};
pub use init::uniform_fan_in;
pub use network::{
    grad_check, gru_step, Activation, GradCheckReport, GruVars, LayerSpec, Network, NetworkSpec,
    ParamBinding, ParamTensor,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors from the network toolkit's fallible surface (spec validation,
/// forward/backward contracts, optimizer steps, checkpoints).
#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("non-finite gradient in parameter `{param}` (max |g| = {max_abs})")]
    NonFiniteGradient { param: String, max_abs: f64 },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint was written for a different architecture (spec hash mismatch)")]
    SpecHashMismatch,
    #[error("checkpoint parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
}
