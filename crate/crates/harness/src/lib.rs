//! Command-line plumbing around `lasad-core`: verification suites, training
//! and sampling runs, the SAD ablation and scaling benchmarks.

pub mod ablation;
pub mod bench;
pub mod commands;
pub mod config;
pub mod verify;

use lasad_core::attention::AttentionError;
use lasad_core::data::DataError;
use lasad_core::model::ModelError;
use lasad_core::numerics::NumericsError;
use thiserror::Error;

pub use config::{DataSource, RunConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "LASAD_OUT_DIR";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("bench: {0}")]
    Bench(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
        move |source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
