//! Run configuration in a flat `key = value` text format.
//!
//! Blank lines and `#` comments are ignored. `preset` seeds the model
//! fields before the other keys are applied, whatever its position.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lasad_core::data::Task;
use lasad_core::model::{AdamWConfig, ModelConfig};

use crate::HarnessError;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        task: Task,
        train_count: usize,
        eval_count: usize,
        seed: u64,
    },
    /// Token-grid files; without an eval file the training file doubles as
    /// the evaluation set.
    Files {
        train: PathBuf,
        eval: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataSource,
    pub optimizer: AdamWConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Overwrite the checkpoint every this many steps; 0 writes it at the end only.
    pub checkpoint_every: u64,
    pub out_dir: Option<PathBuf>,
    pub cfg_scale: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::nano(),
            data: DataSource::Synthetic {
                task: Task::RowCopy,
                train_count: 4096,
                eval_count: 256,
                seed: 1,
            },
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            steps: 1000,
            batch_size: 8,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            out_dir: None,
            cfg_scale: 1.0,
            temperature: 1.0,
            top_k: 0,
            samples: 8,
        }
    }
}

const RUN_KEYS: &[&str] = &[
    "preset",
    "task",
    "train_count",
    "eval_count",
    "data_seed",
    "train_file",
    "eval_file",
    "steps",
    "batch_size",
    "seed",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "grad_clip",
    "warmup_steps",
    "decay_steps",
    "eval_every",
    "checkpoint_every",
    "out_dir",
    "cfg_scale",
    "temperature",
    "top_k",
    "samples",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !RUN_KEYS.contains(&k) && !ModelConfig::KEYS.contains(&k) {
                return Err(HarnessError::Config(format!(
                    "line {}: unknown key {k:?}",
                    i + 1
                )));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(HarnessError::Config(format!(
                    "line {}: duplicate key {k:?}",
                    i + 1
                )));
            }
        }

        let mut cfg = RunConfig::default();
        if let Some(p) = entries.remove("preset") {
            cfg.model = ModelConfig::from_preset(&p)?;
        }
        let model_pairs: Vec<(&str, &str)> = entries
            .iter()
            .filter(|(k, _)| ModelConfig::KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect();
        cfg.model = cfg.model.apply_pairs(model_pairs)?;

        let get = |k: &str| entries.get(k).map(String::as_str);
        let has_synthetic = ["task", "train_count", "eval_count", "data_seed"]
            .iter()
            .any(|k| entries.contains_key(*k));
        cfg.data = match (get("train_file"), has_synthetic) {
            (Some(_), true) => {
                return Err(HarnessError::Config(
                    "train_file cannot be combined with synthetic task keys".into(),
                ))
            }
            (Some(train), false) => DataSource::Files {
                train: PathBuf::from(train),
                eval: get("eval_file").map(PathBuf::from),
            },
            (None, _) => {
                if get("eval_file").is_some() {
                    return Err(HarnessError::Config("eval_file requires train_file".into()));
                }
                let DataSource::Synthetic {
                    task,
                    train_count,
                    eval_count,
                    seed,
                } = cfg.data
                else {
                    unreachable!("default data source is synthetic")
                };
                DataSource::Synthetic {
                    task: match get("task") {
                        Some(t) => t.parse()?,
                        None => task,
                    },
                    train_count: get("train_count")
                        .map_or(Ok(train_count), |v| parse_num("train_count", v))?,
                    eval_count: get("eval_count")
                        .map_or(Ok(eval_count), |v| parse_num("eval_count", v))?,
                    seed: get("data_seed").map_or(Ok(seed), |v| parse_num("data_seed", v))?,
                }
            }
        };

        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = get($key) {
                    $field = parse_num($key, v)?;
                }
            };
        }
        set!("steps", cfg.steps);
        set!("batch_size", cfg.batch_size);
        set!("seed", cfg.seed);
        set!("lr", cfg.optimizer.lr);
        set!("beta1", cfg.optimizer.beta1);
        set!("beta2", cfg.optimizer.beta2);
        set!("eps", cfg.optimizer.eps);
        set!("weight_decay", cfg.optimizer.weight_decay);
        set!("warmup_steps", cfg.optimizer.warmup_steps);
        set!("decay_steps", cfg.optimizer.decay_steps);
        set!("eval_every", cfg.eval_every);
        set!("checkpoint_every", cfg.checkpoint_every);
        set!("cfg_scale", cfg.cfg_scale);
        set!("temperature", cfg.temperature);
        set!("top_k", cfg.top_k);
        set!("samples", cfg.samples);
        if let Some(v) = get("grad_clip") {
            cfg.optimizer.grad_clip = match v {
                "none" => None,
                _ => Some(parse_num("grad_clip", v)?),
            };
        }
        cfg.out_dir = get("out_dir").map(PathBuf::from);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        if let DataSource::Synthetic {
            train_count,
            eval_count,
            ..
        } = self.data
        {
            if train_count == 0 || eval_count == 0 {
                return Err(HarnessError::Config(
                    "train_count and eval_count must be positive".into(),
                ));
            }
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(HarnessError::Config(format!(
                "cfg_scale {} must be >= 0",
                self.cfg_scale
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(HarnessError::Config(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Serializes every field; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line =
            |k: &str, v: String| writeln!(out, "{k} = {v}").expect("writing to a String");
        for (k, v) in self.model.to_pairs() {
            line(&k, v);
        }
        match &self.data {
            DataSource::Synthetic {
                task,
                train_count,
                eval_count,
                seed,
            } => {
                line("task", task.name().to_string());
                line("train_count", train_count.to_string());
                line("eval_count", eval_count.to_string());
                line("data_seed", seed.to_string());
            }
            DataSource::Files { train, eval } => {
                line("train_file", train.display().to_string());
                if let Some(e) = eval {
                    line("eval_file", e.display().to_string());
                }
            }
        }
        let o = &self.optimizer;
        line("steps", self.steps.to_string());
        line("batch_size", self.batch_size.to_string());
        line("seed", self.seed.to_string());
        line("lr", format!("{:?}", o.lr));
        line("beta1", format!("{:?}", o.beta1));
        line("beta2", format!("{:?}", o.beta2));
        line("eps", format!("{:?}", o.eps));
        line("weight_decay", format!("{:?}", o.weight_decay));
        line(
            "grad_clip",
            o.grad_clip.map_or("none".into(), |c| format!("{c:?}")),
        );
        line("warmup_steps", o.warmup_steps.to_string());
        line("decay_steps", o.decay_steps.to_string());
        line("eval_every", self.eval_every.to_string());
        line("checkpoint_every", self.checkpoint_every.to_string());
        if let Some(d) = &self.out_dir {
            line("out_dir", d.display().to_string());
        }
        line("cfg_scale", format!("{:?}", self.cfg_scale));
        line("temperature", format!("{:?}", self.temperature));
        line("top_k", self.top_k.to_string());
        line("samples", self.samples.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn preset_applies_before_overrides() {
        let cfg = RunConfig::parse("hidden = 32\npreset = micro\n").unwrap();
        assert_eq!(cfg.model.layers, 4);
        assert_eq!(cfg.model.hidden, 32);
    }

    #[test]
    fn comments_and_spacing() {
        let cfg = RunConfig::parse("# run\n\n  steps=12   # short\nlr = 0.01\ngrad_clip = 1.5\n")
            .unwrap();
        assert_eq!(cfg.steps, 12);
        assert_eq!(cfg.optimizer.lr, 0.01);
        assert_eq!(cfg.optimizer.grad_clip, Some(1.5));
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let e = RunConfig::parse("steps = 1\nsteps = 2\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2") && e.contains("duplicate"), "{e}");
        let e = RunConfig::parse("stepz = 1\n").unwrap_err().to_string();
        assert!(e.contains("unknown key"), "{e}");
        assert!(RunConfig::parse("steps\n").is_err());
        assert!(RunConfig::parse("steps = many\n").is_err());
        assert!(RunConfig::parse("batch_size = 0\n").is_err());
        assert!(RunConfig::parse("task = spiral\n").is_err());
        assert!(RunConfig::parse("train_file = a.txt\ntask = row_copy\n").is_err());
        assert!(RunConfig::parse("eval_file = a.txt\n").is_err());
    }

    #[test]
    fn file_source_round_trip() {
        let cfg = RunConfig::parse(
            "train_file = train.txt\neval_file = eval.txt\nout_dir = /tmp/x\nattention = hybrid\n",
        )
        .unwrap();
        assert_eq!(
            cfg.data,
            DataSource::Files {
                train: "train.txt".into(),
                eval: Some("eval.txt".into())
            }
        );
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
