//! `train` and `sample`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use lasad_core::data::{
    dequantize, read_grids, write_grids, write_pgm, GrayImage, SyntheticSpec, Task, TokenGrid,
};
use lasad_core::model::{
    sample as sample_grid, Checkpoint, LossTrace, Model, ModelError, SampleOptions, Trainer,
};

use crate::config::{DataSource, RunConfig};
use crate::{HarnessError, OUT_DIR_ENV};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRACE_FILE: &str = "trace.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Mixed into the data seed to draw the evaluation set.
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

/// `out_dir` from the config, else `$LASAD_OUT_DIR`, else `runs`.
pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<TokenGrid>,
    pub eval: Vec<TokenGrid>,
    /// Present for synthetic data, which has an analytic loss floor.
    pub spec: Option<SyntheticSpec>,
}

pub fn synthetic_spec(cfg: &RunConfig, task: Task, count: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        task,
        height: cfg.model.grid_height,
        width: cfg.model.grid_width,
        vocab: cfg.model.vocab,
        classes: cfg.model.classes,
        count,
        seed,
    }
}

fn read_grid_file(path: &Path, cfg: &RunConfig) -> Result<Vec<TokenGrid>, HarnessError> {
    let file = File::open(path).map_err(HarnessError::io(path))?;
    let grids = read_grids(
        BufReader::new(file),
        cfg.model.grid_height,
        cfg.model.grid_width,
    )?;
    for (i, g) in grids.iter().enumerate() {
        g.validate(cfg.model.vocab, cfg.model.classes)
            .map_err(|e| HarnessError::Config(format!("{} grid {}: {e}", path.display(), i + 1)))?;
    }
    if grids.is_empty() {
        return Err(HarnessError::Config(format!(
            "{} holds no grids",
            path.display()
        )));
    }
    Ok(grids)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, HarnessError> {
    match &cfg.data {
        DataSource::Synthetic {
            task,
            train_count,
            eval_count,
            seed,
        } => {
            let spec = synthetic_spec(cfg, *task, *train_count, *seed);
            let eval = synthetic_spec(cfg, *task, *eval_count, seed ^ EVAL_SEED_SALT);
            Ok(Dataset {
                train: spec.generate()?,
                eval: eval.generate()?,
                spec: Some(spec),
            })
        }
        DataSource::Files { train, eval } => {
            let train_grids = read_grid_file(train, cfg)?;
            let eval_grids = match eval {
                Some(p) => read_grid_file(p, cfg)?,
                None => train_grids.clone(),
            };
            Ok(Dataset {
                train: train_grids,
                eval: eval_grids,
                spec: None,
            })
        }
    }
}

#[derive(Debug)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub trace: LossTrace,
    /// `(step, eval loss)` pairs, the last one after the final step.
    pub evals: Vec<(u64, f64)>,
    pub floor: Option<f64>,
}

impl TrainArtifacts {
    pub fn final_eval(&self) -> f64 {
        self.evals.last().map_or(f64::NAN, |e| e.1)
    }
}

/// Loads a checkpoint, naming the file in I/O errors.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    Checkpoint::load(path).map_err(|e| match e {
        ModelError::Io(source) => HarnessError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other.into(),
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(HarnessError::io(path))
}

fn evals_csv(evals: &[(u64, f64)]) -> String {
    let mut out = String::from("step,eval_loss\n");
    for (s, l) in evals {
        out.push_str(&format!("{s},{l:?}\n"));
    }
    out
}

fn parse_evals(text: &str) -> Vec<(u64, f64)> {
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let (s, v) = l.split_once(',')?;
            Some((s.trim().parse().ok()?, v.trim().parse().ok()?))
        })
        .collect()
}

/// Trains per `cfg`, writing the config, a checkpoint, the loss trace and
/// the eval curve to the output directory. With `resume`, continues from
/// that checkpoint up to `cfg.steps` total steps.
pub fn train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainArtifacts, HarnessError> {
    cfg.validate()?;
    let dir = output_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
    let data = load_dataset(cfg)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let trace_path = dir.join(TRACE_FILE);
    let eval_path = dir.join(EVAL_FILE);
    write_file(&dir.join(CONFIG_FILE), &cfg.to_text())?;

    let (mut trainer, mut trace, mut evals) = match resume {
        None => {
            let model = Model::new(cfg.model.clone(), cfg.seed)?;
            (
                Trainer::new(model, cfg.optimizer, cfg.seed, cfg.batch_size)?,
                LossTrace::default(),
                Vec::new(),
            )
        }
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config != cfg.model {
                return Err(HarnessError::Config(format!(
                    "{} was trained with a different model config",
                    path.display()
                )));
            }
            let trainer = Trainer::resume(&ckpt, cfg.batch_size)?;
            let mut trace = match std::fs::read_to_string(&trace_path) {
                Ok(text) => LossTrace::parse_csv(&text)?,
                Err(_) => LossTrace::default(),
            };
            trace.records.retain(|r| r.step <= ckpt.step);
            let mut evals = std::fs::read_to_string(&eval_path)
                .map(|t| parse_evals(&t))
                .unwrap_or_default();
            evals.retain(|e| e.0 <= ckpt.step);
            writeln!(
                log,
                "resuming from {} at step {}",
                path.display(),
                ckpt.step
            )
            .ok();
            (trainer, trace, evals)
        }
    };

    let floor = data.spec.as_ref().map(SyntheticSpec::floor_loss);
    let eval_batch = cfg.batch_size.max(32);
    while trainer.step < cfg.steps {
        let record = trainer.train_step(&data.train)?;
        trace.records.push(record);
        let s = trainer.step;
        if cfg.eval_every > 0 && s % cfg.eval_every == 0 && s < cfg.steps {
            let e = trainer.model.eval_loss(&data.eval, eval_batch)?;
            evals.push((s, e));
            writeln!(log, "step {s:>6}  train {:.4}  eval {e:.4}", record.loss).ok();
        }
        if cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0 {
            trainer.checkpoint().save(&ckpt_path)?;
            write_file(&trace_path, &trace.to_csv())?;
            write_file(&eval_path, &evals_csv(&evals))?;
        }
    }
    let e = trainer.model.eval_loss(&data.eval, eval_batch)?;
    if evals.last().map(|x| x.0) != Some(trainer.step) {
        evals.push((trainer.step, e));
    }
    trainer.checkpoint().save(&ckpt_path)?;
    write_file(&trace_path, &trace.to_csv())?;
    write_file(&eval_path, &evals_csv(&evals))?;
    let last = trace.records.last().map_or(f64::NAN, |r| r.loss);
    write!(
        log,
        "done at step {}: train {last:.4}, eval {e:.4}",
        trainer.step
    )
    .ok();
    if let Some(f) = floor {
        write!(
            log,
            ", floor {f:.4}, ln V {:.4}",
            (cfg.model.vocab as f64).ln()
        )
        .ok();
    }
    writeln!(log, "\nartifacts in {}", dir.display()).ok();
    Ok(TrainArtifacts {
        dir,
        trace,
        evals,
        floor,
    })
}

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub checkpoint: PathBuf,
    /// `None` samples unconditionally.
    pub label: Option<usize>,
    pub options: SampleOptions,
    pub count: usize,
    pub out: PathBuf,
    pub pgm: Option<PathBuf>,
    /// Pixels per token edge in the PGM raster.
    pub patch: usize,
    /// Reports rule compliance against this synthetic task.
    pub task: Option<Task>,
}

#[derive(Debug)]
pub struct SampleOutcome {
    pub grids: Vec<TokenGrid>,
    pub compliance: Option<f64>,
}

/// Draws `count` grids; grid `i` uses seed `options.seed + i`.
pub fn sample_from_model(
    model: &Model,
    label: Option<usize>,
    options: &SampleOptions,
    count: usize,
) -> Result<Vec<TokenGrid>, HarnessError> {
    (0..count)
        .map(|i| {
            let opts = SampleOptions {
                seed: options.seed.wrapping_add(i as u64),
                ..*options
            };
            Ok(sample_grid(model, label, &opts)?)
        })
        .collect()
}

/// Mean rule compliance of `grids` under `task`.
pub fn compliance(model: &Model, task: Task, grids: &[TokenGrid]) -> f64 {
    let c = model.config();
    let spec = SyntheticSpec {
        task,
        height: c.grid_height,
        width: c.grid_width,
        vocab: c.vocab,
        classes: c.classes,
        count: 0,
        seed: 0,
    };
    grids.iter().map(|g| spec.rule_compliance(g)).sum::<f64>() / grids.len().max(1) as f64
}

/// Side-by-side raster of the dequantized grids.
pub fn raster(grids: &[TokenGrid], vocab: usize, patch: usize) -> Result<GrayImage, HarnessError> {
    let images = grids
        .iter()
        .map(|g| dequantize(g, patch, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let h = images.first().map_or(0, |i| i.height);
    let w: usize = images.iter().map(|i| i.width).sum();
    let mut pixels = Vec::with_capacity(h * w);
    for r in 0..h {
        for img in &images {
            pixels.extend_from_slice(&img.pixels[r * img.width..(r + 1) * img.width]);
        }
    }
    Ok(GrayImage::new(h, w, pixels)?)
}

pub fn sample(req: &SampleRequest) -> Result<SampleOutcome, HarnessError> {
    let model = load_checkpoint(&req.checkpoint)?.model()?;
    let grids = sample_from_model(&model, req.label, &req.options, req.count)?;
    if let Some(dir) = req.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    let file = File::create(&req.out).map_err(HarnessError::io(&req.out))?;
    write_grids(BufWriter::new(file), &grids)?;
    if let Some(p) = &req.pgm {
        let image = raster(&grids, model.config().vocab, req.patch.max(1))?;
        let file = File::create(p).map_err(HarnessError::io(p))?;
        write_pgm(BufWriter::new(file), &image)?;
    }
    let compliance = req.task.map(|t| compliance(&model, t, &grids));
    Ok(SampleOutcome { grids, compliance })
}
