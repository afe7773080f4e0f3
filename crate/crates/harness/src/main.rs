use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lasad_core::data::Task;
use lasad_core::model::SampleOptions;
use lasad_harness::ablation::{self, AblationOptions};
use lasad_harness::bench::{self, BenchOptions, Mechanism};
use lasad_harness::commands::{self, SampleRequest};
use lasad_harness::verify::{self, Fault, Scope};
use lasad_harness::{RunConfig, OUT_DIR_ENV};

#[derive(Parser)]
#[command(
    name = "lasad",
    version,
    about = "Linear attention with spatial-aware decay: verify, train, sample, bench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run invariant suites and print the worst error per property.
    Verify {
        #[arg(long, default_value = "all")]
        scope: Scope,
        /// Run with a deliberate defect to confirm the suite catches it.
        #[arg(long, value_name = "FAULT")]
        inject_fault: Option<Fault>,
    },
    /// Train a model from a `key = value` run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint up to the configured step count.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Sample token grids from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Class label, or `none` for unconditional sampling.
        #[arg(long, default_value = "0")]
        label: String,
        #[arg(long, default_value_t = 1.0)]
        cfg_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// 0 decodes greedily.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// 0 keeps the full vocabulary.
        #[arg(long, default_value_t = 0)]
        top_k: usize,
        /// Grid file to write; defaults to `samples.txt` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the dequantized grids side by side as a PGM.
        #[arg(long)]
        pgm: Option<PathBuf>,
        /// Pixels per token edge in the PGM.
        #[arg(long, default_value_t = 4)]
        patch: usize,
        /// Report rule compliance against this synthetic task.
        #[arg(long)]
        task: Option<Task>,
    },
    /// Time attention mechanisms across sequence lengths and fit log-log slopes.
    Bench {
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "lasad,hgrn2,linear,softmax"
        )]
        mechanisms: Vec<Mechanism>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "256,512,1024,2048,4096,8192"
        )]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; defaults to `bench.csv` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train paired models with and without the boundary override and compare eval loss.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "column_stripe,row_shift")]
        tasks: Vec<Task>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = ablation::DEFAULT_STEPS)]
        steps: u64,
        /// CSV destination; defaults to `ablation.csv` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn default_out(name: &str) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join(name)
}

fn ensure_parent(path: &std::path::Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify {
            scope,
            inject_fault,
        } => {
            let start = Instant::now();
            let checks = verify::run(scope, inject_fault);
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            println!(
                "{} checks, {failed} failed, {:.1}s",
                checks.len(),
                start.elapsed().as_secs_f64()
            );
            Ok(failed == 0)
        }
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let mut out = std::io::stdout();
            commands::train(&cfg, resume.as_deref(), &mut out)?;
            Ok(true)
        }
        Command::Sample {
            ckpt,
            label,
            cfg_scale,
            seed,
            count,
            temperature,
            top_k,
            out,
            pgm,
            patch,
            task,
        } => {
            let label = match label.as_str() {
                "none" => None,
                l => Some(l.parse().with_context(|| format!("bad label {l:?}"))?),
            };
            let req = SampleRequest {
                checkpoint: ckpt,
                label,
                options: SampleOptions {
                    cfg_scale,
                    temperature,
                    top_k,
                    seed,
                },
                count,
                out: out.unwrap_or_else(|| default_out("samples.txt")),
                pgm,
                patch,
                task,
            };
            let outcome = commands::sample(&req)?;
            println!(
                "wrote {} grids to {}",
                outcome.grids.len(),
                req.out.display()
            );
            if let Some(p) = &req.pgm {
                println!("wrote raster to {}", p.display());
            }
            if let Some(c) = outcome.compliance {
                println!("rule compliance {c:.4}");
            }
            Ok(true)
        }
        Command::Bench {
            mechanisms,
            n_list,
            d,
            repeats,
            seed,
            out,
        } => {
            let opts = BenchOptions {
                mechanisms,
                n_list,
                d,
                repeats,
                seed,
            };
            let report = bench::run(&opts, |r| {
                println!(
                    "{:<8} N={:<6} {:.6}s ± {:.6}s  state {} B",
                    r.mechanism, r.n, r.mean_seconds, r.std_seconds, r.state_bytes
                )
            })?;
            let path = out.unwrap_or_else(|| default_out("bench.csv"));
            ensure_parent(&path)?;
            std::fs::write(&path, report.to_csv())
                .with_context(|| format!("writing {}", path.display()))?;
            print!("{}", report.summary());
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Ablate {
            tasks,
            seeds,
            steps,
            out,
        } => {
            if seeds < 2 {
                bail!("at least two seeds are needed to estimate run-to-run spread");
            }
            let opts = AblationOptions {
                tasks,
                seeds: (0..seeds).collect(),
                steps,
                ..AblationOptions::default()
            };
            let report = ablation::run(&opts, |r| println!("{r}"))?;
            for s in &report.summaries {
                println!("{s}");
            }
            let path = out.unwrap_or_else(|| default_out("ablation.csv"));
            ensure_parent(&path)?;
            std::fs::write(&path, report.to_csv())
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
            Ok(report.summaries.iter().all(|s| s.passed()))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
