//! A small reverse-mode automatic differentiation engine.
//!
//! The neural models in this crate are trained end to end on a tape of 2-D
//! tensor operations built per forward pass: ops evaluate eagerly, record
//! themselves, and a single reverse sweep from a scalar loss produces exact
//! gradients with additive accumulation for shared sub-expressions. On top of
//! the tape sit the pieces a recurrent classifier needs: inverted dropout
//! with an explicit evaluation/Monte-Carlo mode switch, focal loss, the Adam
//! optimizer, global-norm gradient clipping, LSTM/BiLSTM scans, and versioned
//! checkpoints.
//!
//! Everything here is deterministic given a seed: dropout masks come from the
//! caller's seeded generator and the numeric kernels are plain sequential
//! f64 loops, so repeated runs produce bit-identical results.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod nn;
mod tensor;

use thiserror::Error;

pub use checkpoint::{Checkpoint, ParamTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, NodeId};
pub use nn::{
    bilstm, clip_global_norm, dropout, focal_loss, lstm, mean_of, AdamConfig, AdamState,
    BiLstmOutput, DropoutMode, LstmOutput, FOCAL_EPS, GRAD_CLIP_NORM,
};
pub use tensor::Tensor;

/// Errors from graph construction, optimization, or checkpoint IO.
#[derive(Debug, Error)]
pub enum NdiffError {
    #[error("{op}: incompatible shapes ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a 1x1 loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("dropout rate must be in [0, 1), got {rate}")]
    BadDropoutRate { rate: f64 },
    #[error("adam: {0}")]
    Adam(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint is missing parameter {name:?}")]
    MissingParameter { name: String },
    #[error(
        "parameter {name:?} has shape {found_rows}x{found_cols}, expected {rows}x{cols}"
    )]
    ParameterShape {
        name: String,
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
}
