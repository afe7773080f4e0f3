//! The class-conditional autoregressive token-grid generator.
//!
//! Pre-norm residual blocks: `x + Attn(Norm(x))` then `x + SwiGLU(Norm(x))`.
//! The class label enters as a prefix embedding; a dedicated extra row of
//! the class table is the null label used for classifier-free guidance.

mod checkpoint;
mod config;
mod decode;
mod forward;
mod params;
mod train;

use thiserror::Error;

use crate::attention::AttentionError;
use crate::numerics::NumericsError;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{default_mlp_hidden, AttentionKind, Mixer, ModelConfig};
pub use decode::{guide_logits, sample, sample_logits, Decoder, SampleOptions};
pub use params::ParamStore;
pub use train::{AdamW, AdamWConfig, LossTrace, StepRecord, Trainer};

use params::Layout;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model configuration error: {0}")]
    Config(String),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore,
}

impl Model {
    /// A freshly initialized model; weights are a pure function of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config);
        let params = params::initialize(&specs, seed)?;
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Wraps existing parameters, checking names and shapes against the
    /// layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config);
        if params.len() != specs.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            t.ensure_finite("checkpoint")
                .map_err(|e| ModelError::Checkpoint(format!("tensor {}: {e}", spec.name)))?;
        }
        // Reorder into layout order so indices line up.
        let ordered = specs
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    params.get(&s.name).expect("checked above").clone(),
                )
            })
            .collect();
        Ok(Self {
            config,
            layout,
            params: ParamStore::from_pairs(ordered)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of allocated scalars, by enumeration.
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }
}

#[cfg(test)]
mod tests;
