//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Tape, Tensor, Var};

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        // NaN compares false, so a poisoned check never passes.
        self.checked > 0 && self.max_rel_err < tol
    }

    fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        self.checked += 1;
        if self.max_rel_err.is_nan() {
            return;
        }
        if rel.is_nan() || self.worst.is_none() || rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.max_abs_err = if abs.is_nan() {
                abs
            } else {
                self.max_abs_err.max(abs)
            };
            self.worst = Some((input, index, analytic, numeric));
        } else {
            self.max_abs_err = self.max_abs_err.max(abs);
        }
    }
}

#[derive(Default)]
pub struct GradCheckOptions {
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks them all.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

/// Compares the tape gradient of `build` against central differences of the
/// same function.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let numeric = |xs: &[Tensor]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };
    check_gradients_against(inputs, &build, numeric, opts)
}

/// Like [`check_gradients`], but the finite differences are taken of a
/// separately supplied scalar function, typically an independent route to
/// the same loss.
pub fn check_gradients_against<F, G>(
    inputs: &[Tensor],
    build: F,
    reference: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
    G: Fn(&[Tensor]) -> Result<f64, NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(x.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(cap) if cap < n => {
                let mut c = sample(&mut rng, n, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = reference(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = reference(&work);
            work[i].data_mut()[j] = orig;
            let numeric = match (plus, minus) {
                (Ok(p), Ok(m)) => (p - m) / (2.0 * FD_STEP),
                _ => f64::NAN,
            };
            report.record(i, j, analytic[i].get(j).copied().unwrap_or(0.0), numeric);
        }
    }
    Ok(report)
}
