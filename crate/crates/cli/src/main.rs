//! `qfuse`: train full-precision teachers, fine-tune quantized students, run experiment
//! matrices and turn their metrics into plot-ready tables.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or input error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use qfuse_core::analysis::analyze_error_propagation;
use qfuse_core::checkpoint::{read_header, Checkpoint};
use qfuse_core::config::TrainConfig;
use qfuse_core::fusion::strip_normalization;
use qfuse_core::io::write_atomic;
use qfuse_core::matrix::{run_matrix, summarize, summary_text, CellStatus, ExperimentSpec};
use qfuse_core::model::evaluate;
use qfuse_core::par::Execution;
use qfuse_core::quant::QuantizerKind;
use qfuse_core::report::write_report;
use qfuse_core::train::{finetune_qat_on, train_full_precision_on, Split};
use qfuse_core::Error;

#[derive(Parser)]
#[command(
    name = "qfuse",
    version,
    about = "Quantization-aware training experiments with balanced feature fusion"
)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "QFUSE_OUT_DIR", default_value = "runs")]
    out: PathBuf,
    /// Worker threads (matrix cells run in parallel).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a full-precision model.
    TrainFp {
        #[arg(long)]
        config: PathBuf,
    },
    /// Attach quantizers to a teacher checkpoint and fine-tune.
    Qat {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Override the config's distillation divergence (none, kl or js).
        #[arg(long)]
        ada: Option<String>,
    },
    /// Run every cell of an experiment spec; completed cells are skipped.
    Matrix {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build gradient, IoU and bit-width tables from a directory of runs.
    Report { metrics_dir: PathBuf },
    /// Per-layer quantization error and first-order propagation check.
    AnalyzeErrors {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        bits: u32,
        #[arg(long, default_value = "lsq")]
        quantizer: String,
        #[arg(long, default_value_t = 50)]
        samples: usize,
    },
    /// Disable fusion normalization and report its effect on eval metrics.
    StripLn {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure {
        code: 2,
        error: e.into(),
    }
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure {
        code: 1,
        error: e.into(),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::load(path).map_err(input)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
        cfg.validate().map_err(input)?;
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path)
        .with_context(|| format!("cannot use checkpoint {}", path.display()))
        .map_err(input)
}

fn exec(jobs: Option<usize>) -> Execution {
    match jobs {
        Some(1) => Execution::Sequential,
        _ => Execution::available(),
    }
}

fn save_run(out: &Path, ckpt: Checkpoint, metrics: &qfuse_core::metrics::RunMetrics) -> Result<(), Failure> {
    ckpt.save(out.join("checkpoint.ckpt")).map_err(runtime)?;
    metrics.write(out.join("metrics.csv")).map_err(runtime)?;
    if let Some(last) = metrics.last() {
        println!(
            "epoch {}: accuracy {:.4}, center error {:.5}, iou>=0.5 {:.4}, grad deep/shallow {:.3}",
            last.epoch,
            last.accuracy,
            last.center_error,
            last.iou_at_half,
            last.grad_ratio()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let exec = exec(cli.jobs);
    match cli.command {
        Command::TrainFp { config } => {
            let cfg = load_config(&config, cli.seed)?;
            let split = Split::for_config(&cfg, exec);
            let (model, metrics) = train_full_precision_on(&cfg, &split, exec).map_err(runtime)?;
            save_run(&cli.out, Checkpoint::new(cfg.teacher_config(), model), &metrics)
        }
        Command::Qat { config, teacher, ada } => {
            let mut cfg = load_config(&config, cli.seed)?;
            if let Some(a) = ada {
                cfg.qat.ada = a.parse().map_err(input)?;
            }
            let header = read_header(&teacher)
                .with_context(|| format!("cannot use teacher {}", teacher.display()))
                .map_err(input)?;
            let expected = cfg.model.architecture_hash();
            if header.architecture != expected {
                return Err(input(anyhow!(
                    "teacher {} has architecture {} but the config describes {expected}",
                    teacher.display(),
                    header.architecture
                )));
            }
            let teacher = load_checkpoint(&teacher)?;
            let split = Split::for_config(&cfg, exec);
            let (student, metrics) = finetune_qat_on(&cfg, &teacher.model, &split, exec).map_err(|e| match e {
                Error::ArchitectureMismatch { .. } | Error::Checkpoint(_) => input(e),
                other => runtime(other),
            })?;
            save_run(&cli.out, Checkpoint::new(cfg, student), &metrics)
        }
        Command::Matrix { config } => {
            let spec = ExperimentSpec::load(&config).map_err(input)?;
            let mut spec = spec;
            if let Some(s) = cli.seed {
                spec.grid.seeds = vec![s];
            }
            let outcomes = run_matrix(&spec, &cli.out, cli.jobs.unwrap_or(1)).map_err(runtime)?;
            print!("{}", summary_text(&spec.hash(), &summarize(&outcomes)));
            let failed: Vec<String> = outcomes
                .iter()
                .filter_map(|o| match &o.status {
                    CellStatus::Failed(msg) => Some(format!("{}: {msg}", o.cell.id)),
                    _ => None,
                })
                .collect();
            let skipped = outcomes.iter().filter(|o| o.status == CellStatus::Skipped).count();
            println!(
                "{} cells, {skipped} already complete, {} failed",
                outcomes.len(),
                failed.len()
            );
            if failed.is_empty() {
                Ok(())
            } else {
                Err(runtime(anyhow!("failed cells:\n{}", failed.join("\n"))))
            }
        }
        Command::Report { metrics_dir } => {
            if !metrics_dir.is_dir() {
                return Err(input(anyhow!("{} is not a directory", metrics_dir.display())));
            }
            let files = write_report(&metrics_dir, &cli.out).map_err(|e| match e {
                Error::EmptyDataset => input(anyhow!("no metrics.csv found under {}", metrics_dir.display())),
                other => runtime(other),
            })?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::AnalyzeErrors {
            checkpoint,
            bits,
            quantizer,
            samples,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let kind: QuantizerKind = quantizer.parse().map_err(input)?;
            let mut cfg = ckpt.config.clone();
            if let Some(s) = cli.seed {
                cfg.run.seed = s;
            }
            let split = Split::generate(cfg.run.seed, 0, samples.max(1), exec);
            let report =
                analyze_error_propagation(&ckpt.model, &split.eval.scenes, bits, kind).map_err(|e| match e {
                    Error::InvalidArgument(_) => input(e),
                    other => runtime(other),
                })?;
            let hash = cfg.hash();
            let mut layers = format!("# config_hash={hash}\nlayer,median_relative_error\n");
            for l in &report.layers {
                let _ = writeln!(layers, "{},{}", l.name, l.median);
            }
            let mut first = format!("# config_hash={hash}\nscale,median_relative_residual\n");
            for (s, r) in report.first_order.scales.iter().zip(&report.first_order.residuals) {
                let _ = writeln!(first, "{s},{r}");
            }
            write_atomic(&cli.out.join("error_propagation.csv"), layers.as_bytes()).map_err(runtime)?;
            write_atomic(&cli.out.join("first_order.csv"), first.as_bytes()).map_err(runtime)?;
            print!("{}", layers.lines().skip(1).collect::<Vec<_>>().join("\n"));
            println!(
                "\nfirst-order residual exponent (median): {:.3}",
                report.first_order.median_exponent
            );
            Ok(())
        }
        Command::StripLn { checkpoint } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let split = Split::for_config(&ckpt.config, exec);
            let (stripped, report) = strip_normalization(&ckpt.model, |m| {
                let e = evaluate(m, &split.eval.scenes, exec)?;
                Ok(vec![
                    ("accuracy".to_string(), e.accuracy),
                    ("center_error".to_string(), e.center_error),
                    ("iou_at_half".to_string(), e.iou_at_half),
                ])
            })
            .map_err(runtime)?;
            let mut table = format!(
                "# config_hash={}\nmetric,normalized,stripped,delta\n",
                ckpt.config.hash()
            );
            for (name, with, without) in &report.rows {
                let _ = writeln!(table, "{name},{with},{without},{}", without - with);
            }
            write_atomic(&cli.out.join("strip_report.csv"), table.as_bytes()).map_err(runtime)?;
            Checkpoint::new(ckpt.config, stripped)
                .save(cli.out.join("stripped.ckpt"))
                .map_err(runtime)?;
            print!("{}", table.lines().skip(1).collect::<Vec<_>>().join("\n"));
            println!();
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
