//! Attention mechanisms, each in an efficient form and an independent
//! quadratic form used to check it.
//!
//! All functions here take per-head `N×d` tensors. Multi-head, batched and
//! differentiable versions for the model live in [`tape_ops`].

mod decay;
mod linear;
mod softmax;
pub mod tape_ops;

use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};
use crate::spatial_decay::SpatialDecayError;

pub use decay::{
    decay_attention_recurrent, decay_chunked, decay_gate, hgrn2_recurrent, lasad_chunked,
    lasad_recurrent, lasad_recurrent_with, materialized_decay_oracle, DecayVariant, LasadOptions,
    RecurrentState, ORACLE_MAX_LEN,
};
pub use linear::{linear_attention_parallel, linear_attention_recurrent, FeatureMap, LinearNorm};
pub use softmax::{rope_in_place, softmax_attention, ROPE_BASE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("attention input shape error: {0}")]
    Shape(String),
    #[error("decay {value} at position {position}, channel {channel} is outside (0, 1]")]
    DecayOutOfRange {
        position: usize,
        channel: usize,
        value: f64,
    },
    #[error("normalizer is {value} at row {row}; delta normalization needs it strictly positive")]
    SingularNormalizer { row: usize, value: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("materialized oracle refuses N = {n} (cap {cap}); it is meant for tests")]
    OracleTooLong { n: usize, cap: usize },
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Spatial(#[from] SpatialDecayError),
}

/// Per-head query/key/value matrices, one row per position.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttentionInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self, AttentionError> {
        let inputs = Self { q, k, v };
        inputs.validate()?;
        Ok(inputs)
    }

    /// `(N, d_k, d_v)`.
    pub fn dims(&self) -> Result<(usize, usize, usize), AttentionError> {
        let (n, dk) = self.q.dims2()?;
        let (nk, dk2) = self.k.dims2()?;
        let (nv, dv) = self.v.dims2()?;
        if n == 0 || n != nk || n != nv || dk != dk2 {
            return Err(AttentionError::Shape(format!(
                "q {:?}, k {:?}, v {:?}",
                self.q.shape(),
                self.k.shape(),
                self.v.shape()
            )));
        }
        Ok((n, dk, dv))
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        self.dims()?;
        self.q.ensure_finite("attention.q")?;
        self.k.ensure_finite("attention.k")?;
        self.v.ensure_finite("attention.v")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
