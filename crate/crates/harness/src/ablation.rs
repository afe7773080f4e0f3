//! Paired training runs with and without the row-boundary decay override.
//!
//! Both arms of a pair share the seed, hence the initial weights, the
//! training set and the batch order; they differ only in whether the decay
//! is forced to 1 at row ends. Run-to-run spread is measured across seeds.

use std::fmt;

use lasad_core::attention::DecayVariant;
use lasad_core::data::{SyntheticSpec, Task};
use lasad_core::model::{AdamWConfig, AttentionKind, Model, ModelConfig, Trainer};

use crate::HarnessError;

pub const DEFAULT_STEPS: u64 = 2000;

/// Fixed seed of the held-out evaluation grids.
const EVAL_SEED: u64 = 999;

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub tasks: Vec<Task>,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Grid edge; the grid is square.
    pub side: usize,
    pub vocab: usize,
    pub classes: usize,
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            tasks: vec![Task::ColumnStripe, Task::RowShift],
            seeds: (0..5).collect(),
            steps: DEFAULT_STEPS,
            batch_size: 8,
            lr: 1e-3,
            side: 8,
            vocab: 16,
            classes: 4,
            train_count: 4096,
            eval_count: 256,
        }
    }
}

impl AblationOptions {
    pub fn model_config(&self, sad: bool) -> ModelConfig {
        let variant = if sad {
            DecayVariant::Lasad
        } else {
            DecayVariant::Hgrn2Shared
        };
        ModelConfig {
            grid_width: self.side,
            grid_height: self.side,
            vocab: self.vocab,
            classes: self.classes,
            cfg_dropout: 0.0,
            attention: AttentionKind::Decay(variant),
            ..ModelConfig::nano()
        }
    }

    fn spec(&self, task: Task, count: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            task,
            height: self.side,
            width: self.side,
            vocab: self.vocab,
            classes: self.classes,
            count,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub task: Task,
    pub seed: u64,
    pub sad: bool,
    pub eval_loss: f64,
    pub seconds: f64,
}

impl fmt::Display for RunResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} seed {:<3} {:<6} eval {:.4}  ({:.1}s)",
            self.task.name(),
            self.seed,
            if self.sad { "sad" } else { "no-sad" },
            self.eval_loss,
            self.seconds
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSummary {
    pub task: Task,
    pub sad: Vec<f64>,
    pub no_sad: Vec<f64>,
    pub floor: f64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation.
fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

impl TaskSummary {
    pub fn sad_mean(&self) -> f64 {
        mean(&self.sad)
    }

    pub fn no_sad_mean(&self) -> f64 {
        mean(&self.no_sad)
    }

    /// Mean eval-loss advantage of the override.
    pub fn margin(&self) -> f64 {
        self.no_sad_mean() - self.sad_mean()
    }

    /// Run-to-run spread: the larger of the two arms' seed-to-seed standard
    /// deviations.
    pub fn sigma(&self) -> f64 {
        std_dev(&self.sad).max(std_dev(&self.no_sad))
    }

    pub fn passed(&self) -> bool {
        let (m, s) = (self.margin(), self.sigma());
        self.sad_mean() < self.no_sad_mean() && m >= 3.0 * s && s.is_finite()
    }
}

impl fmt::Display for TaskSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.sigma();
        write!(
            f,
            "{} {:<14} sad {:.4}  no-sad {:.4}  margin {:+.4}  sigma {:.4}  margin/sigma {:.1}  floor {:.4}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.task.name(),
            self.sad_mean(),
            self.no_sad_mean(),
            self.margin(),
            s,
            self.margin() / s,
            self.floor
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
    pub summaries: Vec<TaskSummary>,
}

impl AblationReport {
    pub const HEADER: &'static str = "task,seed,sad,eval_loss,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{:?},{:.3}\n",
                r.task.name(),
                r.seed,
                r.sad,
                r.eval_loss,
                r.seconds
            ));
        }
        out
    }
}

/// Trains one arm and returns its held-out eval loss.
pub fn train_arm(
    opts: &AblationOptions,
    task: Task,
    seed: u64,
    sad: bool,
) -> Result<RunResult, HarnessError> {
    let start = std::time::Instant::now();
    let train = opts.spec(task, opts.train_count, 100 + seed).generate()?;
    let eval = opts.spec(task, opts.eval_count, EVAL_SEED).generate()?;
    let model = Model::new(opts.model_config(sad), seed)?;
    let optimizer = AdamWConfig {
        lr: opts.lr,
        ..AdamWConfig::default()
    };
    let mut trainer = Trainer::new(model, optimizer, seed, opts.batch_size)?;
    trainer.run(&train, opts.steps, |_| {})?;
    Ok(RunResult {
        task,
        seed,
        sad,
        eval_loss: trainer.model.eval_loss(&eval, 64)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every `(task, seed, arm)` combination; `progress` sees each run.
pub fn run<F: FnMut(&RunResult)>(
    opts: &AblationOptions,
    mut progress: F,
) -> Result<AblationReport, HarnessError> {
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for &task in &opts.tasks {
        let mut sad = Vec::new();
        let mut no_sad = Vec::new();
        for &seed in &opts.seeds {
            for arm in [true, false] {
                let r = train_arm(opts, task, seed, arm)?;
                progress(&r);
                if arm {
                    sad.push(r.eval_loss);
                } else {
                    no_sad.push(r.eval_loss);
                }
                runs.push(r);
            }
        }
        summaries.push(TaskSummary {
            task,
            sad,
            no_sad,
            floor: opts.spec(task, 1, 0).floor_loss(),
        });
    }
    Ok(AblationReport { runs, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = TaskSummary {
            task: Task::RowShift,
            sad: vec![1.0, 1.2, 1.1],
            no_sad: vec![2.0, 2.1, 2.2],
            floor: 0.3,
        };
        assert!((s.margin() - 1.0).abs() < 1e-12);
        assert!((s.sigma() - 0.1).abs() < 1e-12);
        assert!(s.passed());
        let close = TaskSummary {
            no_sad: vec![1.2, 1.3, 1.1],
            ..s.clone()
        };
        assert!(!close.passed());
        let worse = TaskSummary {
            sad: vec![2.5, 2.6, 2.7],
            ..s
        };
        assert!(!worse.passed());
    }

    #[test]
    fn arms_differ_only_in_variant() {
        let opts = AblationOptions::default();
        let a = opts.model_config(true);
        let b = opts.model_config(false);
        assert_eq!(a.attention, AttentionKind::Decay(DecayVariant::Lasad));
        assert_eq!(b.attention, AttentionKind::Decay(DecayVariant::Hgrn2Shared));
        assert_eq!(
            ModelConfig {
                attention: a.attention,
                ..b.clone()
            },
            a
        );
        let ma = Model::new(a, 3).unwrap();
        let mb = Model::new(b, 3).unwrap();
        assert_eq!(ma.params(), mb.params());
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let opts = AblationOptions {
            tasks: vec![Task::ColumnStripe],
            seeds: vec![0, 1],
            steps: 3,
            side: 4,
            train_count: 16,
            eval_count: 4,
            ..AblationOptions::default()
        };
        let a = run(&opts, |_| {}).unwrap();
        let b = run(&opts, |_| {}).unwrap();
        let losses = |r: &AblationReport| {
            r.runs
                .iter()
                .map(|x| x.eval_loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.runs.len(), 4);
        assert!(a.to_csv().starts_with(AblationReport::HEADER));
    }
}
