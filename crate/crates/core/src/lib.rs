//! Linear attention with spatial-aware decay for autoregressive token-grid
//! generation.
//!
//! * [`numerics`]: `f64` tensors and a reverse-mode tape.
//! * [`attention`]: softmax, linear, decayed, HGRN2-style and spatial-decay
//!   attention, each with an efficient form and a quadratic oracle.
//! * [`spatial_decay`]: row-boundary decay schedules for raster-flattened grids.
//! * [`model`]: the class-conditional generator, training and sampling.
//! * [`data`]: synthetic spatial tasks, a toy quantizer and the grid file format.

pub mod attention;
pub mod data;
pub mod model;
pub mod numerics;
pub mod spatial_decay;
