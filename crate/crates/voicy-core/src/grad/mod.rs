//! Reverse-mode differentiation on an explicit tape, sized for the small
//! recurrent/convolutional stacks this crate trains. The op set is closed:
//! every layer the encoders and decoder need is built from the primitives in
//! [`Tape`], nothing more general.
//!
//! Everything is `f64`. Gradient checking against central differences is the
//! contract for every op, so single precision is not worth its trouble here.

mod adam;
mod check;
mod checkpoint;
mod layers;
mod tape;

pub use adam::{optimizer_step, AdamConfig, OptimizerState};
pub use check::{
    gradient_check, gradient_check_layers, gradient_check_report, layer_battery, CheckCase,
    CheckReport,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{
    conv1d, forward, glorot_uniform, init_parameters, linear, run_bidirectional, run_gru,
    run_lstm, Activation, LayerSpec, ParamEntry, Parameters, RecurrentCell,
};
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch in {layer}: expected {expected}, got {actual}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        actual: String,
    },

    #[error("tensor values contain a non-finite entry")]
    NonFinite,

    #[error("tensor shape {shape:?} does not match {got} values")]
    BadShape { shape: Vec<usize>, got: usize },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("gradient supplied for frozen parameter {0}")]
    FrozenParamGrad(String),

    #[error("diverged")]
    Diverged,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Dense row-major tensor. Rank 1 and 2 cover everything this crate does;
/// conv kernels use rank 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != values.len() {
            return Err(GradError::BadShape {
                shape,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GradError::NonFinite);
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows/cols under the matrix view: rank 1 is a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}
