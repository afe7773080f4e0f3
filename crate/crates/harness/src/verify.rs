//! Invariant suites behind `lasad verify`.
//!
//! Every check compares two independent routes to the same quantity and
//! reports the worst disagreement against a tolerance.

use std::fmt;
use std::str::FromStr;

use lasad_core::attention::{
    decay_attention_recurrent, decay_chunked, decay_gate, hgrn2_recurrent, lasad_chunked,
    lasad_recurrent, linear_attention_parallel, linear_attention_recurrent,
    materialized_decay_oracle, softmax_attention, tape_ops::decay_scan, AttentionInputs,
    DecayVariant, FeatureMap, LasadOptions, LinearNorm,
};
use lasad_core::data::{SyntheticSpec, Task, TokenGrid};
use lasad_core::model::{
    AdamWConfig, AttentionKind, Checkpoint, Decoder, Model, ModelConfig, Trainer,
};
use lasad_core::numerics::gradcheck::{
    check_gradients, check_gradients_against, GradCheckOptions, GradCheckReport,
};
use lasad_core::numerics::kernels::log_sum_exp;
use lasad_core::numerics::{self, NumericsError, Tape, Tensor, Var, DECAY_CEIL, DECAY_FLOOR};
use lasad_core::spatial_decay::{
    apply_spatial, build_schedule_at, max_logspace_error, spatial_override, BoundaryMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::HarnessError;

pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-10;
pub const LOGSPACE_TOL: f64 = 1e-12;
pub const DECODE_TOL: f64 = 1e-9;
pub const PARAM_COUNT_TOL: f64 = 0.05;
/// Reported size of the B configuration.
pub const B_PARAMS: f64 = 111e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Numerics,
    Attention,
    Sad,
    Model,
    All,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::Numerics => "numerics",
            Scope::Attention => "attention",
            Scope::Sad => "sad",
            Scope::Model => "model",
            Scope::All => "all",
        }
    }
}

impl FromStr for Scope {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Scope::Numerics,
            Scope::Attention,
            Scope::Sad,
            Scope::Model,
            Scope::All,
        ]
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| HarnessError::Config(format!("unknown scope {s:?}")))
    }
}

/// Deliberate defects for mutation smoke tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The decay gate loses its `[DECAY_FLOOR, DECAY_CEIL]` clamp.
    UnclampedDecay,
}

impl FromStr for Fault {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unclamped-decay" => Ok(Fault::UnclampedDecay),
            _ => Err(HarnessError::Config(format!("unknown fault {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bound {
    Below,
    AtMost,
}

#[derive(Clone, Debug)]
pub struct Check {
    pub scope: &'static str,
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    bound: Bound,
    pub note: String,
}

impl Check {
    fn new(scope: &'static str, name: &str, error: f64, tolerance: f64, bound: Bound) -> Self {
        Self {
            scope,
            name: name.to_string(),
            error,
            tolerance,
            bound,
            note: String::new(),
        }
    }

    /// Passes when `error < tolerance`.
    pub fn below(scope: &'static str, name: &str, error: f64, tolerance: f64) -> Self {
        Self::new(scope, name, error, tolerance, Bound::Below)
    }

    /// Passes when `error ≤ tolerance`.
    pub fn at_most(scope: &'static str, name: &str, error: f64, tolerance: f64) -> Self {
        Self::new(scope, name, error, tolerance, Bound::AtMost)
    }

    /// A count of mismatches that must be zero.
    pub fn exact(scope: &'static str, name: &str, mismatches: usize) -> Self {
        Self::new(scope, name, mismatches as f64, 0.0, Bound::AtMost)
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::Below => self.error < self.tolerance,
            Bound::AtMost => self.error <= self.tolerance,
        }
    }

    fn failed_with(scope: &'static str, name: &str, err: impl fmt::Display) -> Self {
        Self::at_most(scope, name, f64::NAN, 0.0).with_note(format!("error: {err}"))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let op = match self.bound {
            Bound::Below => "<",
            Bound::AtMost => "<=",
        };
        write!(
            f,
            "{verdict} {}/{}: max err {:.3e} (need {op} {:.0e})",
            self.scope, self.name, self.error, self.tolerance
        )?;
        if !self.note.is_empty() {
            write!(f, "  {}", self.note)?;
        }
        Ok(())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mismatches(a: &[f64], b: &[f64]) -> usize {
    if a.len() != b.len() {
        return a.len().max(b.len());
    }
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.to_bits() != y.to_bits())
        .count()
}

fn grad_note(r: &GradCheckReport) -> String {
    match r.worst {
        Some((i, j, a, n)) => format!(
            "{} coords, worst input {i}[{j}]: analytic {a:.6e} vs numeric {n:.6e}",
            r.checked
        ),
        None => format!("{} coords", r.checked),
    }
}

fn grad_check(
    scope: &'static str,
    name: &str,
    report: Result<GradCheckReport, NumericsError>,
) -> Check {
    match report {
        Ok(r) => {
            let mut c = Check::below(scope, name, r.max_rel_err, GRAD_TOL).with_note(grad_note(&r));
            if r.checked == 0 {
                c.error = f64::NAN;
            }
            c
        }
        Err(e) => Check::failed_with(scope, name, e),
    }
}

// ---------------------------------------------------------------- numerics

fn weighted(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var, NumericsError> {
    let w = tape.constant(w.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

pub fn tape_gradients() -> Vec<Check> {
    let s = "numerics";
    let mut r = rng(1);
    let a = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5, 3], 1.0, &mut r);
    let w43 = Tensor::randn(&[4, 3], 1.0, &mut r);
    let w45 = Tensor::randn(&[4, 5], 1.0, &mut r);
    let gain = Tensor::uniform(&[5], 0.5, 1.5, &mut r);
    let table = Tensor::randn(&[6, 5], 1.0, &mut r);
    let pos = Tensor::uniform(&[4, 5], 0.2, 2.0, &mut r);
    let opts = GradCheckOptions::default();
    vec![
        grad_check(
            s,
            "grad matmul+sigmoid",
            check_gradients(
                &[a.clone(), b.clone()],
                |t: &mut Tape, x: &[Var]| {
                    let m = t.matmul(x[0], x[1])?;
                    let g = t.sigmoid(m)?;
                    weighted(t, g, &w43)
                },
                &opts,
            ),
        ),
        grad_check(
            s,
            "grad causal softmax",
            check_gradients(
                std::slice::from_ref(&w45),
                |t: &mut Tape, x: &[Var]| {
                    let p = t.softmax_rows(x[0], true)?;
                    weighted(t, p, &a)
                },
                &opts,
            ),
        ),
        grad_check(
            s,
            "grad rms_norm",
            check_gradients(
                &[a.clone(), gain.clone()],
                |t: &mut Tape, x: &[Var]| {
                    let n = t.rms_norm(x[0], x[1], 1e-5)?;
                    weighted(t, n, &w45)
                },
                &opts,
            ),
        ),
        grad_check(
            s,
            "grad gather+cross_entropy",
            check_gradients(
                &[table.clone(), b.clone()],
                |t: &mut Tape, x: &[Var]| {
                    let e = t.gather(x[0], &[0, 3, 3, 5])?;
                    let logits = t.matmul(e, x[1])?;
                    t.cross_entropy(logits, &[2, 0, 1, 1])
                },
                &opts,
            ),
        ),
        grad_check(
            s,
            "grad silu/elu+1/exp/log",
            check_gradients(
                &[a.clone(), pos.clone()],
                |t: &mut Tape, x: &[Var]| {
                    let u = t.silu(x[0])?;
                    let v = t.elu_plus_one(x[0])?;
                    let l = t.log(x[1])?;
                    let e = t.scale(x[1], 0.3)?;
                    let e = t.exp(e)?;
                    let uv = t.mul(u, v)?;
                    let le = t.sub(l, e)?;
                    let all = t.add(uv, le)?;
                    weighted(t, all, &w45)
                },
                &opts,
            ),
        ),
    ]
}

pub fn matmul_vs_naive() -> Check {
    let mut r = rng(2);
    let (m, k, n) = (7, 13, 5);
    let a = Tensor::randn(&[m, k], 1.0, &mut r);
    let b = Tensor::randn(&[k, n], 1.0, &mut r);
    let fast = numerics::matmul(&a, &b);
    let mut err = 0.0_f64;
    match fast {
        Ok(c) => {
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum();
                    err = err.max((c.at(i, j) - want).abs());
                }
            }
            Check::at_most("numerics", "matmul vs triple loop", err, 1e-12)
        }
        Err(e) => Check::failed_with("numerics", "matmul vs triple loop", e),
    }
}

pub fn softmax_normalization() -> Check {
    let mut r = rng(3);
    let x = Tensor::randn(&[9, 9], 30.0, &mut r);
    match numerics::softmax_rows(&x, true) {
        Ok(p) => {
            let mut err = 0.0_f64;
            let mut masked = 0;
            for t in 0..9 {
                err = err.max((p.row(t).iter().sum::<f64>() - 1.0).abs());
                masked += p.row(t)[t + 1..].iter().filter(|v| **v != 0.0).count();
            }
            let err = if masked > 0 { f64::INFINITY } else { err };
            Check::at_most("numerics", "causal softmax rows sum to 1", err, 1e-12)
        }
        Err(e) => Check::failed_with("numerics", "causal softmax rows sum to 1", e),
    }
}

pub fn log_sum_exp_shift() -> Check {
    let mut r = rng(4);
    let x: Vec<f64> = (0..32).map(|_| r.gen_range(-5.0..5.0)).collect();
    let shifted: Vec<f64> = x.iter().map(|v| v + 1000.0).collect();
    let err = (log_sum_exp(&shifted) - 1000.0 - log_sum_exp(&x)).abs();
    Check::at_most(
        "numerics",
        "log-sum-exp shift invariance at +1000",
        err,
        1e-9,
    )
}

pub fn numerics_suite() -> Vec<Check> {
    let mut v = tape_gradients();
    v.push(matmul_vs_naive());
    v.push(softmax_normalization());
    v.push(log_sum_exp_shift());
    v
}

// --------------------------------------------------------------- attention

fn random_inputs(n: usize, dk: usize, dv: usize, r: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
    (
        Tensor::randn(&[n, dk], 1.0, r),
        Tensor::randn(&[n, dk], 1.0, r),
        Tensor::randn(&[n, dv], 1.0, r),
    )
}

/// Row-end override written out directly: position `r + 1` of a bare
/// sequence is a boundary when it is a multiple of `w`.
fn spatial_by_hand(decay: &Tensor, w: usize) -> Tensor {
    let d = decay.shape()[1];
    let mut out = decay.data().to_vec();
    for (r, row) in out.chunks_exact_mut(d).enumerate() {
        if (r + 1) % w == 0 {
            row.fill(1.0);
        }
    }
    Tensor::new(decay.shape().to_vec(), out).expect("same shape")
}

fn one_minus(t: &Tensor) -> Tensor {
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|x| 1.0 - x).collect(),
    )
    .expect("same shape")
}

/// `lasad_recurrent` against the materialized oracle fed the hand-built
/// spatial schedule, over `seeds` random shapes with `N ≤ 64`, `d ≤ 16`.
pub fn oracle_equivalence(seeds: u64) -> Check {
    let name = "lasad_recurrent vs materialized oracle";
    let mut err = 0.0_f64;
    for seed in 0..seeds {
        let mut r = rng(1000 + seed);
        let n = r.gen_range(1..=64);
        let dk = r.gen_range(1..=16);
        let dv = r.gen_range(1..=16);
        let w = r.gen_range(1..=n + 4);
        let (q, _, v) = random_inputs(n, dk, dv, &mut r);
        let lam = Tensor::uniform(&[n, dk], 0.05, 1.0, &mut r);
        let fast = match lasad_recurrent(&q, &v, &lam, w) {
            Ok(o) => o,
            Err(e) => return Check::failed_with("attention", name, e),
        };
        let oracle = AttentionInputs::new(q, one_minus(&lam), v)
            .and_then(|inputs| materialized_decay_oracle(&inputs, &spatial_by_hand(&lam, w)));
        match oracle {
            Ok(o) => err = err.max(fast.max_abs_diff(&o)),
            Err(e) => return Check::failed_with("attention", name, e),
        }
    }
    Check::below("attention", name, err, ORACLE_TOL).with_note(format!("{seeds} seeds"))
}

/// λ ≡ 1 reduces the decayed scan to plain linear attention, and a row
/// wider than the sequence reduces LASAD to HGRN2, both bit for bit.
pub fn degeneracy() -> Vec<Check> {
    let mut r = rng(5);
    let mut linear = 0;
    let mut hgrn = 0;
    for n in [1, 7, 33, 64] {
        let (q, k, v) = random_inputs(n, 5, 4, &mut r);
        let lam = Tensor::uniform(&[n, 5], 0.05, 1.0, &mut r);
        let inputs = AttentionInputs::new(q.clone(), k, v.clone()).expect("finite inputs");
        let a = decay_attention_recurrent(&inputs, &Tensor::ones(&[n, 5])).expect("valid decay");
        let b = linear_attention_recurrent(&inputs).expect("valid inputs");
        linear += mismatches(a.data(), b.data());
        for w in [n + 1, 2 * n + 3] {
            let a = lasad_recurrent(&q, &v, &lam, w).expect("valid decay");
            let b = hgrn2_recurrent(&q, &v, &lam).expect("valid decay");
            hgrn += mismatches(a.data(), b.data());
        }
    }
    vec![
        Check::exact(
            "attention",
            "decay with lambda=1 is linear attention (bitwise)",
            linear,
        ),
        Check::exact("attention", "lasad with w>N is hgrn2 (bitwise)", hgrn),
    ]
}

/// `lasad_chunked` for `C ∈ {1, 2, 4, 16, 32, N}` against `C = 1` and the
/// recurrent scan.
pub fn chunk_invariance(seeds: u64) -> Check {
    let name = "lasad_chunked invariant to chunk size";
    let mut err = 0.0_f64;
    for seed in 0..seeds {
        let mut r = rng(2000 + seed);
        let n = r.gen_range(1..=96);
        let d = r.gen_range(1..=8);
        let w = r.gen_range(1..=12);
        let (q, _, v) = random_inputs(n, d, d, &mut r);
        let lam = Tensor::uniform(&[n, d], 0.05, 1.0, &mut r);
        let reference = match lasad_recurrent(&q, &v, &lam, w) {
            Ok(o) => o,
            Err(e) => return Check::failed_with("attention", name, e),
        };
        let base = lasad_chunked(&q, &v, &lam, w, 1);
        let Ok(base) = base else {
            return Check::failed_with("attention", name, "chunk size 1 failed");
        };
        err = err.max(base.max_abs_diff(&reference));
        for c in [2, 4, 16, 32, n] {
            match lasad_chunked(&q, &v, &lam, w, c) {
                Ok(o) => err = err.max(o.max_abs_diff(&base)),
                Err(e) => return Check::failed_with("attention", name, e),
            }
        }
    }
    Check::below("attention", name, err, ORACLE_TOL)
        .with_note(format!("{seeds} seeds, C in {{1,2,4,16,32,N}}"))
}

pub fn linear_forms() -> Check {
    let mut r = rng(6);
    let mut err = 0.0_f64;
    for n in [1, 16, 50] {
        let (q, k, v) = random_inputs(n, 4, 6, &mut r);
        let inputs = AttentionInputs::new(q, k, v).expect("finite inputs");
        let rec = linear_attention_recurrent(&inputs).expect("valid inputs");
        let par = linear_attention_parallel(&inputs, FeatureMap::Identity, LinearNorm::None, true)
            .expect("valid inputs");
        err = err.max(rec.max_abs_diff(&par));
    }
    Check::below(
        "attention",
        "linear recurrent vs masked parallel",
        err,
        ORACLE_TOL,
    )
}

pub fn decay_oracles() -> Check {
    let mut err = 0.0_f64;
    for seed in 0..20 {
        let mut r = rng(3000 + seed);
        let n = r.gen_range(1..=48);
        let (q, k, v) = random_inputs(n, 6, 5, &mut r);
        let lam = Tensor::uniform(&[n, 6], 0.05, 1.0, &mut r);
        let inputs = AttentionInputs::new(q, k, v).expect("finite inputs");
        let rec = decay_attention_recurrent(&inputs, &lam).expect("valid decay");
        let oracle = materialized_decay_oracle(&inputs, &lam).expect("short sequence");
        let chunked = decay_chunked(&inputs, &lam, 7).expect("valid decay");
        err = err
            .max(rec.max_abs_diff(&oracle))
            .max(chunked.max_abs_diff(&oracle));
    }
    Check::below(
        "attention",
        "decayed scan and chunked form vs oracle",
        err,
        ORACLE_TOL,
    )
}

pub fn attention_causality() -> Check {
    let (n, t, d) = (24, 9, 4);
    let mut r = rng(7);
    let (q, k, v) = random_inputs(n, d, d, &mut r);
    let lam = Tensor::uniform(&[n, d], 0.05, 1.0, &mut r);
    let perturb = |x: &Tensor, r: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let mut y = x.clone();
        for val in &mut y.data_mut()[(t + 1) * d..] {
            *val = r.gen_range(lo..hi);
        }
        y
    };
    let (q2, k2, v2) = (
        perturb(&q, &mut r, -2.0, 2.0),
        perturb(&k, &mut r, -2.0, 2.0),
        perturb(&v, &mut r, -2.0, 2.0),
    );
    let lam2 = perturb(&lam, &mut r, 0.1, 0.9);
    let a = AttentionInputs::new(q.clone(), k.clone(), v.clone()).expect("finite");
    let b = AttentionInputs::new(q2.clone(), k2, v2.clone()).expect("finite");
    let runs = [
        (
            linear_attention_recurrent(&a),
            linear_attention_recurrent(&b),
        ),
        (softmax_attention(&a, true), softmax_attention(&b, true)),
        (
            decay_attention_recurrent(&a, &lam),
            decay_attention_recurrent(&b, &lam2),
        ),
        (
            hgrn2_recurrent(&q, &v, &lam),
            hgrn2_recurrent(&q2, &v2, &lam2),
        ),
        (
            lasad_recurrent(&q, &v, &lam, 5),
            lasad_recurrent(&q2, &v2, &lam2, 5),
        ),
        (
            lasad_chunked(&q, &v, &lam, 5, 4),
            lasad_chunked(&q2, &v2, &lam2, 5, 4),
        ),
    ];
    let mut bad = 0;
    for (x, y) in runs {
        match (x, y) {
            (Ok(x), Ok(y)) => bad += mismatches(&x.data()[..(t + 1) * d], &y.data()[..(t + 1) * d]),
            _ => bad += 1,
        }
    }
    Check::exact(
        "attention",
        "future perturbation leaves past outputs bitwise equal",
        bad,
    )
}

pub fn attention_suite() -> Vec<Check> {
    let mut v = vec![oracle_equivalence(50), decay_oracles(), linear_forms()];
    v.extend(degeneracy());
    v.push(chunk_invariance(20));
    v.push(attention_causality());
    v
}

// --------------------------------------------------------------------- sad

/// Indicator-weighted logspace formula against the branch construction over
/// `configs` random `(N, w)` pairs, with and without a leading prefix row.
pub fn logspace_consistency(configs: u64) -> Check {
    let name = "logspace formula vs branch construction";
    let mut err = 0.0_f64;
    for i in 0..configs {
        let mut r = rng(4000 + i);
        let n = r.gen_range(1..=300);
        let w = r.gen_range(1..=n + 8);
        let d = r.gen_range(1..=8);
        let mut lam = Tensor::uniform(&[n, d], 1e-6, 1.0, &mut r);
        // Exact ones and the floor are legal decays and stress the log.
        lam.data_mut()[0] = 1.0;
        lam.data_mut()[n * d - 1] = DECAY_FLOOR;
        let first = (i % 2) as usize;
        match build_schedule_at(&lam, w, first, BoundaryMode::Retain) {
            Ok(s) => err = err.max(max_logspace_error(&s)),
            Err(e) => return Check::failed_with("sad", name, e),
        }
    }
    Check::at_most("sad", name, err, LOGSPACE_TOL).with_note(format!("{configs} configs"))
}

/// Boundary sets and overridden values, each derived two ways.
pub fn boundary_properties() -> Vec<Check> {
    let mut set_bad = 0;
    let mut value_bad = 0;
    for i in 0..60 {
        let mut r = rng(5000 + i);
        let n = r.gen_range(1..=200);
        let w = r.gen_range(1..=n + 3);
        let first = (i % 2) as usize;
        let d = 3;
        let lam = Tensor::uniform(&[n, d], 0.05, 1.0, &mut r);
        let Ok(s) = build_schedule_at(&lam, w, first, BoundaryMode::Retain) else {
            set_bad += 1;
            continue;
        };
        let stepped: Vec<usize> = (1..)
            .map(|m| m * w)
            .skip_while(|&p| p < first.max(1))
            .take_while(|&p| p < first + n)
            .collect();
        if s.boundary_positions != stepped {
            set_bad += 1;
        }
        let spatial = apply_spatial(lam.data(), d, w, first, BoundaryMode::Retain);
        for row in 0..n {
            let boundary = stepped.contains(&(first + row));
            for j in 0..d {
                let want = if boundary {
                    1.0
                } else {
                    lam.data()[row * d + j]
                };
                value_bad += usize::from(spatial[row * d + j].to_bits() != want.to_bits());
            }
        }
    }
    let opts = LasadOptions::new(4);
    let suppress = apply_spatial(&[0.5; 8], 2, 2, 1, BoundaryMode::Suppress);
    let mode_bad = usize::from(opts.mode != BoundaryMode::Retain)
        + usize::from(
            suppress
                != [
                    0.5,
                    0.5,
                    DECAY_FLOOR,
                    DECAY_FLOOR,
                    0.5,
                    0.5,
                    DECAY_FLOOR,
                    DECAY_FLOOR,
                ],
        );
    vec![
        Check::exact("sad", "boundary positions are the multiples of w", set_bad),
        Check::exact(
            "sad",
            "decay is exactly 1 at boundaries and untouched elsewhere",
            value_bad,
        ),
        Check::exact(
            "sad",
            "retain by default, suppress only on request",
            mode_bad,
        ),
    ]
}

/// Gradient of a spatial-decay scan whose gate is tied to the key, taken
/// on the tape and by central differences of the chunked route. Some gate
/// logits are saturated so that the clamp is exercised.
pub fn lasad_gradient(fault: Option<Fault>) -> Check {
    let (n, d, width) = (10, 4, 3);
    let mut r = rng(8);
    let q = Tensor::randn(&[n, d], 1.0, &mut r);
    let v = Tensor::randn(&[n, d], 1.0, &mut r);
    let mut logits = Tensor::randn(&[n, d], 1.5, &mut r);
    logits.data_mut()[d + 1] = -800.0;
    logits.data_mut()[4 * d + 2] = 800.0;
    let w = Tensor::randn(&[n, d], 1.0, &mut r);
    let clamp = fault != Some(Fault::UnclampedDecay);
    let gate = |x: f64| {
        if clamp {
            decay_gate(x)
        } else {
            lasad_core::numerics::kernels::sigmoid(x)
        }
    };

    let build = |tape: &mut Tape, x: &[Var]| -> Result<Var, NumericsError> {
        let mut lam = tape.sigmoid(x[2])?;
        if clamp {
            lam = tape.clamp(lam, DECAY_FLOOR, DECAY_CEIL)?;
        }
        let one = tape.constant(Tensor::scalar(1.0));
        let k = tape.sub(one, lam)?;
        let spatial = spatial_override(tape, lam, n, width, 1, BoundaryMode::Retain)?;
        let out = decay_scan(tape, x[0], k, x[1], Some(spatial), 1, n)?;
        weighted(tape, out, &w)
    };
    let reference = |x: &[Tensor]| -> Result<f64, NumericsError> {
        let lam = Tensor::new(vec![n, d], x[2].data().iter().map(|l| gate(*l)).collect())?;
        let out = lasad_chunked(&x[0], &x[1], &lam, width, 4)
            .map_err(|e| NumericsError::Usage(e.to_string()))?;
        Ok(out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
    };
    let name = match fault {
        None => "gradient through tied key and boundary override",
        Some(Fault::UnclampedDecay) => {
            "gradient through tied key and boundary override [fault: unclamped decay]"
        }
    };
    let report = check_gradients_against(
        &[q, v, logits],
        build,
        reference,
        &GradCheckOptions::default(),
    );
    grad_check("sad", name, report)
}

pub fn sad_suite(fault: Option<Fault>) -> Vec<Check> {
    let mut v = vec![logspace_consistency(100)];
    v.extend(boundary_properties());
    v.push(lasad_gradient(fault));
    v
}

// ------------------------------------------------------------------- model

pub fn all_attention_kinds() -> Vec<AttentionKind> {
    vec![
        AttentionKind::lasad(),
        AttentionKind::Decay(DecayVariant::Hgrn2Shared),
        AttentionKind::Decay(DecayVariant::DataDependent),
        AttentionKind::Decay(DecayVariant::Constant(0.9)),
        AttentionKind::Decay(DecayVariant::None),
        AttentionKind::Softmax,
        AttentionKind::Hybrid,
    ]
}

fn small_config(attention: AttentionKind) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 2,
        vocab: 11,
        classes: 3,
        grid_width: 4,
        grid_height: 4,
        mlp_hidden: 24,
        attention,
        ..ModelConfig::nano()
    }
}

/// Replaces every parameter by draws at a scale where all paths carry
/// gradient of order one.
fn randomize(model: &mut Model, seed: u64) {
    let mut r = rng(seed);
    for t in model.params_mut().tensors_mut() {
        let centre = if t.shape().len() == 1 { 1.0 } else { 0.0 };
        for x in t.data_mut() {
            *x = centre + r.gen_range(-0.5..0.5);
        }
    }
    // Gate biases sit near zero rather than one.
    let names: Vec<String> = model.params().names().to_vec();
    for (name, t) in names.iter().zip(model.params_mut().tensors_mut()) {
        if name.ends_with(".bl") || name.ends_with(".bg") {
            t.data_mut().iter_mut().for_each(|x| *x -= 1.0);
        }
    }
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(0..vocab)).collect()
}

/// Tape gradient of the full nano model (2 layers) against central
/// differences on an 8-token sequence. `coords` caps the coordinates
/// checked per tensor.
pub fn model_gradcheck(coords: Option<usize>) -> Check {
    let name = "nano model gradient vs finite differences (8 tokens)";
    let cfg = ModelConfig {
        grid_width: 4,
        grid_height: 2,
        ..ModelConfig::nano()
    };
    let mut model = match Model::new(cfg, 9) {
        Ok(m) => m,
        Err(e) => return Check::failed_with("model", name, e),
    };
    randomize(&mut model, 10);
    let grid = TokenGrid::new(2, 4, random_tokens(8, 16, 11), 2).expect("valid grid");
    let inputs: Vec<Tensor> = model.params().tensors().to_vec();
    let build = |tape: &mut Tape, vars: &[Var]| -> Result<Var, NumericsError> {
        model
            .loss_on_tape(tape, vars, std::slice::from_ref(&grid), &[Some(2)])
            .map_err(|e| NumericsError::Usage(e.to_string()))
    };
    let opts = GradCheckOptions {
        max_coords_per_input: coords,
        seed: 12,
    };
    grad_check("model", name, check_gradients(&inputs, build, &opts))
}

/// For every attention kind, changing token `j` leaves logits of rows
/// `0..=j` bitwise unchanged and changes some later row.
pub fn model_causality() -> Check {
    let mut bad = 0;
    let mut inert = Vec::new();
    for kind in all_attention_kinds() {
        let mut model = Model::new(small_config(kind), 13).expect("valid config");
        randomize(&mut model, 14);
        let v = model.config().vocab;
        let base = random_tokens(15, v, 15);
        let before = model.forward(&[Some(1)], &[&base]).expect("valid input");
        for j in [0, 4, 7, 13] {
            let mut pert = base.clone();
            pert[j] = (pert[j] + 1) % v;
            let after = model.forward(&[Some(1)], &[&pert]).expect("valid input");
            let split = (j + 1) * v;
            bad += mismatches(&before.data()[..split], &after.data()[..split]);
            if before.data()[split..] == after.data()[split..] {
                inert.push(format!("{kind}@{j}"));
            }
        }
    }
    let note = if inert.is_empty() {
        format!("{} variants", all_attention_kinds().len())
    } else {
        format!("future rows unaffected: {}", inert.join(","))
    };
    let mut c = Check::exact(
        "model",
        "future tokens leave past logits bitwise equal",
        bad,
    )
    .with_note(note);
    if !inert.is_empty() {
        c.error = f64::INFINITY;
    }
    c
}

/// Incremental decoding against the full-prefix forward pass on a 4×4 grid.
pub fn decode_equivalence() -> Check {
    let name = "incremental decode vs full forward on 4x4";
    let mut err = 0.0_f64;
    for kind in all_attention_kinds() {
        let mut model = Model::new(small_config(kind), 16).expect("valid config");
        randomize(&mut model, 17);
        let tokens = random_tokens(16, model.config().vocab, 18);
        for label in [Some(2), None] {
            let full = model
                .forward(&[label], &[&tokens[..15]])
                .expect("valid input");
            let mut dec = Decoder::new(&model);
            let mut rows = vec![dec.start(label).expect("valid label")];
            for &t in &tokens[..15] {
                rows.push(dec.push(t).expect("valid token"));
            }
            for (t, row) in rows.iter().enumerate() {
                for (a, b) in row.iter().zip(full.row(t)) {
                    err = err.max((a - b).abs());
                }
            }
        }
    }
    Check::below("model", name, err, DECODE_TOL)
        .with_note(format!("{} variants", all_attention_kinds().len()))
}

/// Loss before a save and after a load through a file, compared bitwise.
pub fn checkpoint_round_trip() -> Check {
    let name = "checkpoint save+load keeps loss bit-exact";
    let run = || -> Result<(f64, f64, usize), HarnessError> {
        let cfg = small_config(AttentionKind::Hybrid);
        let data = SyntheticSpec {
            task: Task::RowShift,
            height: 4,
            width: 4,
            vocab: cfg.vocab,
            classes: cfg.classes,
            count: 16,
            seed: 3,
        }
        .generate()?;
        let mut trainer = Trainer::new(Model::new(cfg, 19)?, AdamWConfig::default(), 4, 4)?;
        trainer.run(&data, 3, |_| {})?;
        let labels: Vec<Option<usize>> = data.iter().map(|g| Some(g.label)).collect();
        let before = trainer.model.loss(&data, &labels)?;
        let dir = tempfile_dir()?;
        let path = dir.join("round_trip.ckpt");
        trainer.checkpoint().save(&path)?;
        let loaded = Checkpoint::load(&path)?;
        let after = loaded.model()?.loss(&data, &labels)?;
        let bytes = std::fs::metadata(&path)
            .map(|m| m.len() as usize)
            .unwrap_or(0);
        std::fs::remove_dir_all(&dir).ok();
        Ok((before, after, bytes))
    };
    match run() {
        Ok((a, b, bytes)) => Check::exact("model", name, usize::from(a.to_bits() != b.to_bits()))
            .with_note(format!("loss {a:.6} -> {b:.6}, {bytes} bytes")),
        Err(e) => Check::failed_with("model", name, e),
    }
}

fn tempfile_dir() -> Result<std::path::PathBuf, HarnessError> {
    let dir = std::env::temp_dir().join(format!(
        "lasad-verify-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos())
    ));
    std::fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
    Ok(dir)
}

/// Analytic parameter count of the B preset against 111M.
pub fn base_parameter_count() -> Check {
    let cfg = ModelConfig::base();
    let count = cfg.parameter_count();
    Check::at_most(
        "model",
        "B preset parameter count",
        (count as f64 / B_PARAMS - 1.0).abs(),
        PARAM_COUNT_TOL,
    )
    .with_note(format!("{count} analytic vs 111M"))
}

/// Analytic count against enumeration of the instantiated tensors.
pub fn parameter_count_consistency() -> Check {
    let mut bad = 0;
    let mut configs: Vec<ModelConfig> = all_attention_kinds()
        .into_iter()
        .map(small_config)
        .collect();
    configs.push(ModelConfig::nano());
    configs.push(ModelConfig::micro());
    for cfg in configs {
        let model = Model::new(cfg.clone(), 0).expect("valid config");
        bad += usize::from(model.parameter_count() != cfg.parameter_count());
    }
    Check::exact("model", "analytic parameter count equals enumeration", bad)
}

pub fn model_suite() -> Vec<Check> {
    vec![
        model_gradcheck(Some(48)),
        model_causality(),
        decode_equivalence(),
        checkpoint_round_trip(),
        parameter_count_consistency(),
        base_parameter_count(),
    ]
}

pub fn run(scope: Scope, fault: Option<Fault>) -> Vec<Check> {
    match scope {
        Scope::Numerics => numerics_suite(),
        Scope::Attention => attention_suite(),
        Scope::Sad => sad_suite(fault),
        Scope::Model => model_suite(),
        Scope::All => {
            let mut v = numerics_suite();
            v.extend(attention_suite());
            v.extend(sad_suite(fault));
            v.extend(model_suite());
            v
        }
    }
}
