//! Token grids, synthetic spatial tasks, a toy image quantizer and the
//! plain-text grid file format.

mod grid;
mod quantize;
mod synthetic;

use thiserror::Error;

pub use grid::{format_line, parse_line, read_grids, write_grids, TokenGrid};
pub use quantize::{
    bin_center, dequantize, patch_means, quantize_image, read_pgm, write_pgm, GrayImage,
};
pub use synthetic::{Predictive, SyntheticSpec, Task};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
