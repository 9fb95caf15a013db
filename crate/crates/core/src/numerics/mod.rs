//! Dense tensors, reverse-mode autodiff, losses, initializers and optimizers.
//!
//! Everything is 64-bit. Models here are small enough that precision is never
//! the bottleneck, and it keeps finite-difference checks tight.

mod gradcheck;
mod init;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_difference_check, CoordinateSelection, GradCheckReport, GroupReport};
pub use init::{glorot_uniform, ones_row, zeros_row};
pub use optim::{AdamConfig, AdamState, Optimizer, OptimizerKind};
pub use params::{Gradients, ParamId, ParamStore, RunningUpdate};
pub use rng::Rng;
pub use tape::{
    sigmoid, Activation, BatchNormIds, BnMode, Tape, Var, BCE_CLIP, BN_EPS, BN_MOMENTUM,
};
pub use tensor::{matmul, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} data values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("row {row} has {found} values, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("element count of shape {0:?} overflows")]
    Overflow(Vec<usize>),
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Whether stochastic layers sample (train) or act deterministically (infer).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Element-wise activation on a plain tensor.
pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// `-log softmax(logits)[target]`, stabilized by max subtraction.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64, NumericsError> {
    if target >= logits.len() {
        return Err(NumericsError::IndexOutOfRange {
            index: target,
            bound: logits.len(),
        });
    }
    let (lse, _) = tape::log_softmax_parts(logits);
    Ok(lse - logits[target])
}

/// Binary cross-entropy with `p` clipped to `[BCE_CLIP, 1 - BCE_CLIP]`.
pub fn binary_cross_entropy(p: f64, y: f64) -> f64 {
    tape::weighted_bce(p, y, 1.0)
}

/// Inverted dropout on a plain tensor: identity in inference mode.
pub fn dropout(x: &Tensor, p: f64, mode: Mode, rng: &mut Rng) -> Result<Tensor, NumericsError> {
    tape::check_dropout_rate(p)?;
    if mode == Mode::Infer || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = tape::dropout_mask(x.rows(), x.cols(), p, rng);
    let mut out = x.clone();
    for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
        *o *= m;
    }
    Ok(out)
}
