//! Dense `f64` tensors and a tape-based reverse-mode autodiff.
//!
//! The tape-free helpers at the bottom of this file are thin wrappers over the
//! same [`kernels`] the tape uses, for callers that never need gradients.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use tape::{BinaryOp, CustomOp, Tape, UnaryOp, Var};
pub use tensor::Tensor;

/// Smallest and largest value a sigmoid decay gate may take.
pub const DECAY_FLOOR: f64 = 1e-6;
pub const DECAY_CEIL: f64 = 1.0 - 1e-6;

/// Standard deviation used for every weight matrix at initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: non-finite value {value} at flat index {index}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("autodiff usage error: {0}")]
    Usage(String),
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out = Tensor::new(vec![m, n], kernels::matmul(m, k, n, a.data(), b.data()))?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor, NumericsError> {
    let (r, c) = a.dims2()?;
    Tensor::new(vec![c, r], tape::transpose(r, c, a.data()))
}

pub fn softmax_rows(a: &Tensor, causal: bool) -> Result<Tensor, NumericsError> {
    a.ensure_finite("softmax_rows")?;
    let mut tape = Tape::new();
    let v = tape.constant(a.clone());
    let out = tape.softmax_rows(v, causal)?;
    Ok(tape.value(out).clone())
}

pub fn rms_norm(a: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let (x, g) = (tape.constant(a.clone()), tape.constant(gain.clone()));
    let out = tape.rms_norm(x, g, eps)?;
    Ok(tape.value(out).clone())
}

/// Applies `op` elementwise without recording anything.
pub fn unary(op: UnaryOp, a: &Tensor) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let x = tape.constant(a.clone());
    let out = tape.unary(op, x)?;
    Ok(tape.value(out).clone())
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.binary(op, x, y)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests;
