//! Command-line driver for the flow distillation lab.
//!
//! A typical run:
//!   flowopd pretrain-fm --out runs/a
//!   flowopd train-teachers --out runs/a
//!   flowopd baseline-mix --out runs/a
//!   flowopd coldstart --out runs/a
//!   flowopd train-opd --out runs/a
//!   flowopd eval --out runs/a --checkpoint runs/a/student.ckpt

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use flowopd::config::{ColdstartMode, ExperimentConfig, MixMode};
use flowopd::pipeline::{self, RunDir};
use flowopd::{Error, TaskId};

#[derive(Parser, Debug)]
#[command(name = "flowopd", version, about = "Flow-matching teacher/student distillation lab")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory, overriding `output_dir`
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Single-threaded, fixed-order reductions (the only mode implemented)
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Flow-matching pretraining on the data mixture
    PretrainFm,
    /// One GRPO teacher per task, plus the anchor model
    TrainTeachers,
    /// Student initialisation from the teachers
    Coldstart {
        #[arg(long, value_enum)]
        mode: Option<ColdstartArg>,
    },
    /// On-policy distillation of the teachers into the cold-start student
    TrainOpd,
    /// Multi-reward GRPO baseline from the pretrained model
    BaselineMix {
        #[arg(long, value_enum)]
        mode: Option<MixArg>,
    },
    /// Per-task rewards of a checkpoint on the evaluation grid
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Cosine between two tasks' policy gradients at a checkpoint
    DiagInterference {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_task, default_value = "region")]
        task_a: TaskId,
        #[arg(long, value_parser = parse_task, default_value = "preference")]
        task_b: TaskId,
    },
    /// Run the oracle suite
    Verify,
    /// Print the effective configuration as TOML
    ShowConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ColdstartArg {
    Merge,
    Sft,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MixArg {
    ScalarMix,
    EpochInterleaved,
}

fn parse_task(s: &str) -> Result<TaskId, String> {
    TaskId::parse(s).map_err(|e| e.to_string())
}

const EXIT_VERIFY: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CONFIG: u8 = 4;

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(path: &Path, text: &str) {
    println!("{text}");
    eprintln!("wrote {}", path.display());
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> anyhow::Result<bool> {
    let run = RunDir::new(&cfg.output_dir);
    match &cli.command {
        Command::PretrainFm => {
            pipeline::cmd_pretrain_fm(cfg, &run)?;
            eprintln!("wrote {}", run.pretrain().display());
        }
        Command::TrainTeachers => {
            pipeline::cmd_train_teachers(cfg, &run)?;
            for t in TaskId::ALL {
                eprintln!("wrote {}", run.teacher(t).display());
            }
            eprintln!("wrote {}", run.anchor().display());
        }
        Command::Coldstart { mode } => {
            let mode = match mode {
                Some(ColdstartArg::Merge) => ColdstartMode::Merge,
                Some(ColdstartArg::Sft) => ColdstartMode::Sft,
                None => cfg.coldstart.mode,
            };
            pipeline::cmd_coldstart(cfg, &run, mode)?;
            eprintln!("wrote {}", run.coldstart(mode).display());
        }
        Command::TrainOpd => {
            pipeline::cmd_train_opd(cfg, &run)?;
            eprintln!("wrote {}", run.student().display());
        }
        Command::BaselineMix { mode } => {
            let mode = match mode {
                Some(MixArg::ScalarMix) => MixMode::ScalarMix,
                Some(MixArg::EpochInterleaved) => MixMode::EpochInterleaved,
                None => cfg.mix.mode,
            };
            pipeline::cmd_baseline_mix(cfg, &run, mode)?;
            eprintln!("wrote {}", run.mix(mode).display());
        }
        Command::Eval { checkpoint } => {
            let report = pipeline::cmd_eval(cfg, &run, checkpoint)?;
            let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            print_report(&run.path(&format!("eval_{stem}.csv")), &report.render());
        }
        Command::DiagInterference {
            checkpoint,
            task_a,
            task_b,
        } => {
            let report = pipeline::cmd_diag_interference(cfg, &run, checkpoint, *task_a, *task_b)?;
            let (neg, total) = report.negative_fraction();
            println!("{}negative cosine in {neg} of {total} probes", report.render());
        }
        Command::Verify => {
            let report = pipeline::cmd_verify(cfg, &run)?;
            print!("{}", report.render());
            return Ok(report.passed());
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml().context("serialising configuration")?);
        }
    }
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Diverged { .. }) => EXIT_DIVERGED,
        Some(Error::Config(_)) => EXIT_CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli.common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(&cli, &cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VERIFY),
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(Error::Diverged {
                iteration,
                last_good: Some(p),
                ..
            }) = e.downcast_ref::<Error>()
            {
                let path = cfg.output_dir.join(format!("diverged_at_{iteration}.ckpt"));
                if p.save(&path).is_ok() {
                    eprintln!("last good parameters saved to {}", path.display());
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
