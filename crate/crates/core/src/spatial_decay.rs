//! Row-boundary decay schedules for raster-flattened token grids.
//!
//! Positions are 1-based: position `t` is the last token of a grid row iff
//! `t mod w == 0`. At those positions the decay applied to the incoming state
//! is overridden (to exactly 1 by default); everywhere else the data-dependent
//! base decay is used unchanged.

use thiserror::Error;

use crate::numerics::{CustomOp, NumericsError, Tape, Tensor, Var};

/// Tolerance for the multiplicative-vs-logspace consistency check.
pub const LOGSPACE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialDecayError {
    #[error("row width must be at least 1")]
    ZeroWidth,
    #[error("decay schedule needs at least one position")]
    Empty,
    #[error("base decay must be rank 2 (positions x channels), got {0:?}")]
    Shape(Vec<usize>),
    #[error("base decay {value} at position {position} is outside (0, 1]")]
    OutOfRange { position: usize, value: f64 },
}

/// What the decay becomes at row-boundary positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BoundaryMode {
    /// Decay of exactly 1: the state crosses the row end untouched.
    #[default]
    Retain,
    /// Decay clamped to the gate floor: the state is (almost) erased.
    /// Experimental alternative reading; never the default.
    Suppress,
}

impl BoundaryMode {
    pub fn value(self) -> f64 {
        match self {
            BoundaryMode::Retain => 1.0,
            BoundaryMode::Suppress => crate::numerics::DECAY_FLOOR,
        }
    }
}

/// 1-based row-end test, `t mod w == 0`. Position 0 (a conditioning prefix
/// token) is never a boundary.
#[inline]
pub fn is_boundary(t: usize, width: usize) -> bool {
    t != 0 && t.is_multiple_of(width)
}

/// Positions `{w, 2w, ...} ∩ [1, n]`.
pub fn boundary_positions(n: usize, width: usize) -> Vec<usize> {
    (1..=n / width).map(|k| k * width).collect()
}

/// Applies the boundary override to a `rows×channels` buffer whose row `r`
/// sits at position `first_position + r`.
pub fn apply_spatial(
    base: &[f64],
    channels: usize,
    width: usize,
    first_position: usize,
    mode: BoundaryMode,
) -> Vec<f64> {
    let mut out = base.to_vec();
    for (r, row) in out.chunks_exact_mut(channels).enumerate() {
        if is_boundary(first_position + r, width) {
            row.fill(mode.value());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialDecaySchedule {
    pub width: usize,
    pub length: usize,
    /// Position of row 0 of `base`/`spatial`; 1 for a bare image sequence.
    pub first_position: usize,
    pub base: Tensor,
    pub spatial: Tensor,
    pub boundary_positions: Vec<usize>,
}

/// Builds the schedule for a bare image sequence (row `r` is position `r + 1`).
pub fn build_schedule(
    base_decay: &Tensor,
    width: usize,
) -> Result<SpatialDecaySchedule, SpatialDecayError> {
    build_schedule_at(base_decay, width, 1, BoundaryMode::Retain)
}

pub fn build_schedule_at(
    base_decay: &Tensor,
    width: usize,
    first_position: usize,
    mode: BoundaryMode,
) -> Result<SpatialDecaySchedule, SpatialDecayError> {
    if width == 0 {
        return Err(SpatialDecayError::ZeroWidth);
    }
    let (n, d) = base_decay
        .dims2()
        .map_err(|_| SpatialDecayError::Shape(base_decay.shape().to_vec()))?;
    if n == 0 {
        return Err(SpatialDecayError::Empty);
    }
    for (r, row) in base_decay.data().chunks_exact(d.max(1)).enumerate() {
        if let Some(&v) = row.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(SpatialDecayError::OutOfRange {
                position: first_position + r,
                value: v,
            });
        }
    }
    let spatial = apply_spatial(base_decay.data(), d, width, first_position, mode);
    let boundary_positions = (first_position..first_position + n)
        .filter(|t| is_boundary(*t, width))
        .collect();
    Ok(SpatialDecaySchedule {
        width,
        length: n,
        first_position,
        base: base_decay.clone(),
        spatial: Tensor::new(vec![n, d], spatial).expect("same shape as base"),
        boundary_positions,
    })
}

/// Checks `log(spatial) == log(base) · 𝕀(t mod w)` elementwise, where the
/// indicator is 1 when `t mod w` is nonzero. Evaluated as
/// `|exp(log(base)·𝕀) − spatial| ≤ 1e-12`.
pub fn verify_logspace_equivalence(schedule: &SpatialDecaySchedule) -> bool {
    max_logspace_error(schedule) <= LOGSPACE_TOL
}

/// Largest elementwise deviation between the branch construction and the
/// logspace formula (`NaN`/`inf` propagate as `inf`).
pub fn max_logspace_error(schedule: &SpatialDecaySchedule) -> f64 {
    let d = schedule.base.shape()[1];
    let mut worst = 0.0_f64;
    for r in 0..schedule.length {
        let t = schedule.first_position + r;
        let indicator = if is_boundary(t, schedule.width) {
            0.0
        } else {
            1.0
        };
        for j in 0..d {
            let base = schedule.base.data()[r * d + j];
            let logspace = (base.ln() * indicator).exp();
            let err = (logspace - schedule.spatial.data()[r * d + j]).abs();
            worst = if err.is_nan() {
                f64::INFINITY
            } else {
                worst.max(err)
            };
        }
    }
    worst
}

/// Tape op: boundary override on a batch of stacked sequences of `seq_len`
/// rows each. Gradient flows through non-boundary rows only.
pub fn spatial_override(
    tape: &mut Tape,
    base: Var,
    seq_len: usize,
    width: usize,
    first_position: usize,
    mode: BoundaryMode,
) -> Result<Var, NumericsError> {
    let (rows, d) = tape.value(base).dims2()?;
    if width == 0 || seq_len == 0 || rows % seq_len != 0 {
        return Err(NumericsError::Usage(format!(
            "spatial_override: {rows} rows, seq_len {seq_len}, width {width}"
        )));
    }
    let mask: Vec<bool> = (0..rows)
        .map(|r| is_boundary(first_position + r % seq_len, width))
        .collect();
    let mut out = tape.value(base).data().to_vec();
    for (row, &m) in out.chunks_exact_mut(d).zip(&mask) {
        if m {
            row.fill(mode.value());
        }
    }
    let out = Tensor::new(vec![rows, d], out)?;
    tape.custom(
        &[base],
        out,
        Box::new(SpatialOverride { mask, channels: d }),
    )
}

struct SpatialOverride {
    mask: Vec<bool>,
    channels: usize,
}

impl CustomOp for SpatialOverride {
    fn name(&self) -> &'static str {
        "spatial_override"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut g = grad_output.to_vec();
        for (row, &m) in g.chunks_exact_mut(self.channels).zip(&self.mask) {
            if m {
                row.fill(0.0);
            }
        }
        vec![Some(g)]
    }
}
