//! Sequence-length scaling benchmark.
//!
//! Recurrent mechanisms are timed as a token-by-token decode of `N` steps
//! through a constant-size state; softmax is timed as one causal pass over
//! the full sequence. Single-threaded.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use lasad_core::attention::{decay_gate, softmax_attention, AttentionInputs, RecurrentState};
use lasad_core::numerics::Tensor;
use lasad_core::spatial_decay::is_boundary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::HarnessError;

pub const MIN_REPEATS: usize = 5;
pub const MIN_DISTINCT_N: usize = 5;
pub const MIN_SPAN: usize = 16;
/// Row width used for the spatial-decay benchmark.
pub const BENCH_GRID_WIDTH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    Lasad,
    Hgrn2,
    Linear,
    Softmax,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [
        Mechanism::Lasad,
        Mechanism::Hgrn2,
        Mechanism::Linear,
        Mechanism::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Lasad => "lasad",
            Mechanism::Hgrn2 => "hgrn2",
            Mechanism::Linear => "linear",
            Mechanism::Softmax => "softmax",
        }
    }

    pub fn is_recurrent(self) -> bool {
        self != Mechanism::Softmax
    }

    /// Floats held across steps for a sequence of `n` tokens: the `d×d`
    /// state for recurrent forms, the key/value cache for softmax.
    pub fn state_floats(self, n: usize, d: usize) -> usize {
        if self.is_recurrent() {
            d * d
        } else {
            2 * n * d
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::Bench(format!("unknown mechanism {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub mechanisms: Vec<Mechanism>,
    pub n_list: Vec<usize>,
    pub d: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            mechanisms: Mechanism::ALL.to_vec(),
            n_list: vec![256, 512, 1024, 2048, 4096, 8192],
            d: 64,
            repeats: MIN_REPEATS,
            seed: 0,
        }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Bench(m));
        if self.mechanisms.is_empty() {
            return fail("no mechanisms selected".into());
        }
        if self.repeats < MIN_REPEATS {
            return fail(format!(
                "repeats must be at least {MIN_REPEATS}, got {}",
                self.repeats
            ));
        }
        if self.d == 0 {
            return fail("d must be positive".into());
        }
        if self.n_list.contains(&0) || !self.n_list.windows(2).all(|w| w[0] < w[1]) {
            return fail(format!(
                "N list must be strictly ascending and positive: {:?}",
                self.n_list
            ));
        }
        if self.n_list.len() < MIN_DISTINCT_N {
            return fail(format!("need at least {MIN_DISTINCT_N} values of N"));
        }
        let (lo, hi) = (self.n_list[0], self.n_list[self.n_list.len() - 1]);
        if hi < MIN_SPAN * lo {
            return fail(format!("N range {lo}..{hi} spans less than {MIN_SPAN}x"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mechanism: Mechanism,
    pub n: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub state_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub d: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log time against log N, per mechanism.
    pub slopes: Vec<(Mechanism, f64)>,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

struct Inputs {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    decay: Tensor,
}

fn make_inputs(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Inputs {
    let logits = Tensor::randn(&[n, d], 1.0, rng);
    let decay = Tensor::new(
        vec![n, d],
        logits.data().iter().map(|l| decay_gate(l + 3.0)).collect(),
    )
    .expect("matching shape");
    Inputs {
        q: Tensor::randn(&[n, d], 1.0, rng),
        k: Tensor::randn(&[n, d], 1.0, rng),
        v: Tensor::randn(&[n, d], 1.0, rng),
        decay,
    }
}

fn decode(mechanism: Mechanism, x: &Inputs, n: usize, d: usize) -> f64 {
    let mut state = RecurrentState::new(d, d);
    let ones = vec![1.0; d];
    let mut key = vec![0.0; d];
    let mut acc = 0.0;
    for t in 0..n {
        let lam = x.decay.row(t);
        let (k, decay): (&[f64], Option<&[f64]>) = match mechanism {
            Mechanism::Linear => (x.k.row(t), None),
            Mechanism::Hgrn2 | Mechanism::Lasad => {
                for (ki, l) in key.iter_mut().zip(lam) {
                    *ki = 1.0 - l;
                }
                let a = if mechanism == Mechanism::Lasad && is_boundary(t + 1, BENCH_GRID_WIDTH) {
                    &ones[..]
                } else {
                    lam
                };
                (&key[..], Some(a))
            }
            Mechanism::Softmax => unreachable!("softmax is not decoded recurrently"),
        };
        let out = state.step(x.q.row(t), k, x.v.row(t), decay);
        acc += out[0];
    }
    acc
}

fn time_once(mechanism: Mechanism, x: &Inputs, n: usize, d: usize) -> Result<f64, HarnessError> {
    let start = Instant::now();
    if mechanism.is_recurrent() {
        black_box(decode(mechanism, black_box(x), n, d));
    } else {
        let inputs = AttentionInputs::new(x.q.clone(), x.k.clone(), x.v.clone())?;
        let begin = Instant::now();
        black_box(softmax_attention(black_box(&inputs), true)?);
        return Ok(begin.elapsed().as_secs_f64());
    }
    Ok(start.elapsed().as_secs_f64())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Runs the benchmark; `progress` is called after each `(mechanism, N)` cell.
pub fn run<F: FnMut(&BenchRow)>(
    opts: &BenchOptions,
    mut progress: F,
) -> Result<BenchReport, HarnessError> {
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::new();
    for &mechanism in &opts.mechanisms {
        for &n in &opts.n_list {
            let x = make_inputs(n, opts.d, &mut rng);
            // One untimed pass to warm caches and the allocator.
            time_once(mechanism, &x, n, opts.d)?;
            let times = (0..opts.repeats)
                .map(|_| time_once(mechanism, &x, n, opts.d))
                .collect::<Result<Vec<_>, _>>()?;
            let (mean_seconds, std_seconds) = mean_std(&times);
            let row = BenchRow {
                mechanism,
                n,
                mean_seconds,
                std_seconds,
                state_bytes: 8 * mechanism.state_floats(n, opts.d),
            };
            progress(&row);
            rows.push(row);
        }
    }
    let slopes = slopes_of(&opts.mechanisms, &rows);
    Ok(BenchReport {
        d: opts.d,
        repeats: opts.repeats,
        rows,
        slopes,
    })
}

fn slopes_of(mechanisms: &[Mechanism], rows: &[BenchRow]) -> Vec<(Mechanism, f64)> {
    mechanisms
        .iter()
        .map(|&m| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.mechanism == m)
                .map(|r| (r.n as f64, r.mean_seconds))
                .unzip();
            (m, fit_loglog_slope(&xs, &ys))
        })
        .collect()
}

impl BenchReport {
    pub const HEADER: &'static str = "mechanism,n,d,repeats,mean_seconds,std_seconds,state_bytes";

    pub fn slope(&self, m: Mechanism) -> Option<f64> {
        self.slopes.iter().find(|s| s.0 == m).map(|s| s.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:?},{:?},{}\n",
                r.mechanism,
                r.n,
                self.d,
                self.repeats,
                r.mean_seconds,
                r.std_seconds,
                r.state_bytes
            ));
        }
        out
    }

    /// Reads a report written by [`BenchReport::to_csv`]; slopes are refitted.
    pub fn parse_csv(text: &str) -> Result<Self, HarnessError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::HEADER) {
            return Err(HarnessError::Bench(format!(
                "CSV must start with {:?}",
                Self::HEADER
            )));
        }
        let mut rows = Vec::new();
        let mut d = 0;
        let mut repeats = 0;
        let mut mechanisms = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || HarnessError::Bench(format!("CSV line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let mechanism: Mechanism = f[0].parse()?;
            if !mechanisms.contains(&mechanism) {
                mechanisms.push(mechanism);
            }
            d = f[2].parse().map_err(|_| bad())?;
            repeats = f[3].parse().map_err(|_| bad())?;
            rows.push(BenchRow {
                mechanism,
                n: f[1].parse().map_err(|_| bad())?,
                mean_seconds: f[4].parse().map_err(|_| bad())?,
                std_seconds: f[5].parse().map_err(|_| bad())?,
                state_bytes: f[6].parse().map_err(|_| bad())?,
            });
        }
        let slopes = slopes_of(&mechanisms, &rows);
        Ok(Self {
            d,
            repeats,
            rows,
            slopes,
        })
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (m, s) in &self.slopes {
            let rows: Vec<&BenchRow> = self.rows.iter().filter(|r| r.mechanism == *m).collect();
            let states: Vec<String> = rows.iter().map(|r| r.state_bytes.to_string()).collect();
            out.push_str(&format!(
                "{m:<8} log-log slope {s:.3}  state bytes [{}]\n",
                states.join(", ")
            ));
        }
        out
    }
}
