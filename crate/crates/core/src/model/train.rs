use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TokenGrid;
use crate::numerics::{NumericsError, Tensor};

use super::{Checkpoint, Model, ModelError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to rank ≥ 2 tensors only.
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Linear warm-up length in steps.
    pub warmup_steps: u64,
    /// Cosine decay to zero over this many steps after warm-up; 0 keeps
    /// the rate constant.
    pub decay_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: None,
            warmup_steps: 0,
            decay_steps: 0,
        }
    }
}

impl AdamWConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else if self.decay_steps > 0 {
            let p = ((step - self.warmup_steps) as f64 / self.decay_steps as f64).min(1.0);
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * p).cos())
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update with learning rate `lr`; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> f64 {
        let c = self.config;
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let clip = match c.grad_clip {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = if p.shape().len() >= 2 {
                lr * c.weight_decay
            } else {
                0.0
            };
            for (((x, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *x -= decay * *x;
                *x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Per-step training records, serialized as `step,loss,lr,seconds` CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<StepRecord>,
}

impl LossTrace {
    pub const HEADER: &'static str = "step,loss,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            writeln!(out, "{},{:?},{:?},{:.6}", r.step, r.loss, r.lr, r.seconds)
                .expect("writing to a String");
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::HEADER) {
            return Err(ModelError::Input(format!(
                "loss trace must start with {:?}",
                Self::HEADER
            )));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || ModelError::Input(format!("loss trace line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            records.push(StepRecord {
                step: f[0].trim().parse().map_err(|_| bad())?,
                loss: f[1].trim().parse().map_err(|_| bad())?,
                lr: f[2].trim().parse().map_err(|_| bad())?,
                seconds: f[3].trim().parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { records })
    }
}

/// Mini-batch AdamW training. The batch and the label dropout of step `n`
/// are drawn from a generator seeded by `(seed, n)` alone, so a run resumed
/// from a checkpoint continues exactly as the uninterrupted run would.
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Trainer {
    pub fn new(
        model: Model,
        config: AdamWConfig,
        seed: u64,
        batch_size: usize,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if batch_size == 0 {
            return Err(ModelError::Config("batch size must be positive".into()));
        }
        let optimizer = AdamW::new(config, model.params().tensors());
        Ok(Self {
            model,
            optimizer,
            step: 0,
            seed,
            batch_size,
        })
    }

    /// Snapshot including optimizer moments, so training can resume exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            self.step,
            self.seed,
            Some(self.optimizer.clone()),
        )
    }

    pub fn resume(checkpoint: &Checkpoint, batch_size: usize) -> Result<Self, ModelError> {
        let model = checkpoint.model()?;
        let optimizer = checkpoint.optimizer.clone().ok_or_else(|| {
            ModelError::Checkpoint("checkpoint has no optimizer state to resume from".into())
        })?;
        let mut trainer = Self::new(model, optimizer.config, checkpoint.seed, batch_size)?;
        trainer.optimizer = optimizer;
        trainer.step = checkpoint.step;
        Ok(trainer)
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step);
        rng
    }

    /// The grids and (possibly dropped) labels of the next step's batch.
    pub fn next_batch(&self, data: &[TokenGrid]) -> (Vec<TokenGrid>, Vec<Option<usize>>) {
        let mut rng = self.step_rng();
        let p = self.model.config().cfg_dropout;
        let mut grids = Vec::with_capacity(self.batch_size);
        let mut labels = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let g = &data[rng.gen_range(0..data.len())];
            let drop = p > 0.0 && rng.gen::<f64>() < p;
            labels.push((!drop).then_some(g.label));
            grids.push(g.clone());
        }
        (grids, labels)
    }

    pub fn train_step(&mut self, data: &[TokenGrid]) -> Result<StepRecord, ModelError> {
        if data.is_empty() {
            return Err(ModelError::Input("empty training set".into()));
        }
        let start = Instant::now();
        let (grids, labels) = self.next_batch(data);
        let (loss, grads) = match self.model.loss_and_gradients(&grids, &labels) {
            Ok(r) => r,
            Err(ModelError::Numerics(NumericsError::NonFinite { value, .. })) => {
                return Err(ModelError::Diverged {
                    step: self.step,
                    loss: value,
                })
            }
            Err(e) => return Err(e),
        };
        let lr = self.optimizer.config.lr_at(self.step);
        let norm = self
            .optimizer
            .step(self.model.params_mut().tensors_mut(), &grads, lr);
        if !norm.is_finite() {
            return Err(ModelError::Diverged {
                step: self.step,
                loss,
            });
        }
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs `steps` updates, calling `on_step` after each.
    pub fn run<F>(
        &mut self,
        data: &[TokenGrid],
        steps: u64,
        mut on_step: F,
    ) -> Result<LossTrace, ModelError>
    where
        F: FnMut(&StepRecord),
    {
        let mut trace = LossTrace::default();
        for _ in 0..steps {
            let r = self.train_step(data)?;
            on_step(&r);
            trace.records.push(r);
        }
        Ok(trace)
    }
}

impl Model {
    /// Conditional mean cross-entropy over `grids`, evaluated in batches.
    pub fn eval_loss(&self, grids: &[TokenGrid], batch_size: usize) -> Result<f64, ModelError> {
        if grids.is_empty() {
            return Err(ModelError::Input("empty evaluation set".into()));
        }
        let mut total = 0.0;
        for chunk in grids.chunks(batch_size.max(1)) {
            let labels: Vec<Option<usize>> = chunk.iter().map(|g| Some(g.label)).collect();
            total += self.loss(chunk, &labels)? * chunk.len() as f64;
        }
        Ok(total / grids.len() as f64)
    }
}
