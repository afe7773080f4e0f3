//! Synthetic token-grid tasks, each isolating one spatial dependency.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Every row repeats its first token.
    RowCopy,
    /// Row `r` is row `r − 1` rotated right by a class-determined amount.
    RowShift,
    /// The first row is random; every later row copies it, so each token is
    /// predicted by the token one row above.
    ColumnStripe,
    /// 2×2 blocks of one uniform random token.
    Blockworld,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::RowCopy,
        Task::RowShift,
        Task::ColumnStripe,
        Task::Blockworld,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::RowCopy => "row_copy",
            Task::RowShift => "row_shift",
            Task::ColumnStripe => "column_stripe",
            Task::Blockworld => "blockworld",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| DataError::Spec(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub task: Task,
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    pub classes: usize,
    pub count: usize,
    pub seed: u64,
}

/// What the Bayes-optimal predictor knows about the next token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictive {
    Uniform,
    Determined(usize),
}

impl Predictive {
    /// `−ln p(token)` under this predictive; infinite if the token is ruled out.
    pub fn nll(self, token: usize, vocab: usize) -> f64 {
        match self {
            Predictive::Uniform => (vocab as f64).ln(),
            Predictive::Determined(t) if t == token => 0.0,
            Predictive::Determined(_) => f64::INFINITY,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.height == 0 || self.width == 0 {
            return Err(DataError::Spec("grid dimensions must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(DataError::Spec("vocab must hold at least 2 tokens".into()));
        }
        if self.classes == 0 {
            return Err(DataError::Spec("at least one class is required".into()));
        }
        match self.task {
            Task::RowShift if self.width < 2 => {
                Err(DataError::Spec("row_shift needs width >= 2".into()))
            }
            Task::Blockworld if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) => {
                Err(DataError::Spec(format!(
                    "blockworld needs even dimensions, got {}x{}",
                    self.height, self.width
                )))
            }
            _ => Ok(()),
        }
    }

    /// Rotation applied between consecutive rows for class `label`, in `1..w`.
    pub fn shift_for(&self, label: usize) -> usize {
        label % (self.width - 1) + 1
    }

    /// The `index`-th grid; a pure function of `(self, index)`.
    pub fn grid(&self, index: usize) -> Result<TokenGrid, DataError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let (h, w, v) = (self.height, self.width, self.vocab);
        let label = rng.gen_range(0..self.classes);
        let mut tokens = vec![0; h * w];
        match self.task {
            Task::RowCopy => {
                for r in 0..h {
                    let t = rng.gen_range(0..v);
                    tokens[r * w..(r + 1) * w].fill(t);
                }
            }
            Task::RowShift => {
                let shift = self.shift_for(label);
                for t in tokens.iter_mut().take(w) {
                    *t = rng.gen_range(0..v);
                }
                for r in 1..h {
                    for c in 0..w {
                        tokens[r * w + c] = tokens[(r - 1) * w + (c + w - shift) % w];
                    }
                }
            }
            Task::ColumnStripe => {
                for t in tokens.iter_mut().take(w) {
                    *t = rng.gen_range(0..v);
                }
                for i in w..h * w {
                    tokens[i] = tokens[i - w];
                }
            }
            Task::Blockworld => {
                for br in 0..h / 2 {
                    for bc in 0..w / 2 {
                        let t = rng.gen_range(0..v);
                        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            tokens[(2 * br + dr) * w + 2 * bc + dc] = t;
                        }
                    }
                }
            }
        }
        TokenGrid::new(h, w, tokens, label)
    }

    pub fn generate(&self) -> Result<Vec<TokenGrid>, DataError> {
        (0..self.count).map(|i| self.grid(i)).collect()
    }

    /// Bayes-optimal predictive for position `t` (0-based) given the tokens
    /// before it and the label.
    pub fn predictive(&self, prefix: &[usize], label: usize) -> Predictive {
        let w = self.width;
        let t = prefix.len();
        let (r, c) = (t / w, t % w);
        match self.task {
            Task::RowCopy if c > 0 => Predictive::Determined(prefix[t - 1]),
            Task::RowShift if r > 0 => {
                let shift = self.shift_for(label);
                Predictive::Determined(prefix[(r - 1) * w + (c + w - shift) % w])
            }
            Task::ColumnStripe if r > 0 => Predictive::Determined(prefix[t - w]),
            Task::Blockworld if r % 2 == 1 => Predictive::Determined(prefix[t - w]),
            Task::Blockworld if c % 2 == 1 => Predictive::Determined(prefix[t - 1]),
            _ => Predictive::Uniform,
        }
    }

    /// Number of positions per grid whose token is uniformly random.
    pub fn free_positions(&self) -> usize {
        let (h, w) = (self.height, self.width);
        match self.task {
            Task::RowCopy => h,
            Task::RowShift | Task::ColumnStripe => w,
            Task::Blockworld => h * w / 4,
        }
    }

    /// Analytic mean per-token cross-entropy of the Bayes predictor, in nats.
    pub fn floor_loss(&self) -> f64 {
        (self.vocab as f64).ln() * self.free_positions() as f64 / (self.height * self.width) as f64
    }

    /// Mean per-token cross-entropy of the Bayes predictor on `grids`.
    pub fn bayes_loss(&self, grids: &[TokenGrid]) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for g in grids {
            for t in 0..g.len() {
                total += self
                    .predictive(&g.tokens[..t], g.label)
                    .nll(g.tokens[t], self.vocab);
                count += 1;
            }
        }
        total / count as f64
    }

    /// Fraction of rule-determined positions whose token obeys the rule.
    pub fn rule_compliance(&self, grid: &TokenGrid) -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for t in 0..grid.len() {
            if let Predictive::Determined(want) = self.predictive(&grid.tokens[..t], grid.label) {
                total += 1;
                hits += usize::from(want == grid.tokens[t]);
            }
        }
        if total == 0 {
            1.0
        } else {
            hits as f64 / total as f64
        }
    }
}
