use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use restore_cli::checks::Scope;
use restore_cli::commands::{self, exit_code, EvalArgs, SynthArgs, EXIT_CHECK_FAILED, EXIT_OK};
use restore_cli::config::RunConfig;
use restore_core::model::ModelConfig;
use restore_core::Result;

#[derive(Parser)]
#[command(
    name = "restore",
    version,
    about = "Train, evaluate and verify the all-in-one restoration model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lambda_aux=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model, then evaluate it on the held-out set.
    Train(ConfigArgs),
    /// Evaluate a checkpoint and export the routing trace.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "noise,haze,rain")]
        tasks: String,
        #[arg(long, default_value_t = 40)]
        per_task: usize,
        #[arg(long, default_value_t = 32)]
        crop: usize,
        #[arg(long, default_value_t = 1_000_003)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        chunk: usize,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Finite-difference gradient check in double precision.
    Gradcheck {
        /// blocks, dale or model
        scope: Scope,
        /// Maximum relative error (1e-4 for blocks/dale, 1e-3 for model).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train one model per controller alpha and tabulate average PSNR.
    SweepAlpha {
        #[arg(long, default_value = "0.25,0.5,0.9,0.99")]
        alphas: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Parameter counts per component and compute cost.
    Info {
        /// toy or paper; ignored with --config
        #[arg(long, default_value = "paper")]
        preset: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Write synthetic degraded/clean pairs as PPM files plus a manifest.
    Synth {
        #[arg(long, default_value = "noise,haze,rain")]
        tasks: String,
        #[arg(long, default_value_t = 4)]
        per_task: usize,
        #[arg(long, default_value_t = 64)]
        crop: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Train(a) => {
            let cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
            let out = commands::train(&cfg)?;
            if let Some(last) = out.report.steps.last() {
                println!(
                    "step {} loss {:.5} (l1 {:.5}, aux {:.5})",
                    last.step + 1,
                    last.total,
                    last.l1,
                    last.aux
                );
            }
            println!("{}", out.eval.output.to_table("model"));
            println!("artifacts in {}", out.out_dir.display());
            Ok(EXIT_OK)
        }
        Cmd::Eval {
            checkpoint,
            tasks,
            per_task,
            crop,
            seed,
            chunk,
            out,
        } => {
            let args = EvalArgs {
                checkpoint,
                tasks: commands::parse_task_list(&tasks)?,
                per_task,
                crop,
                seed,
                chunk,
                out_dir: out,
            };
            let (_, summary) = commands::eval(&args)?;
            print!("{summary}");
            Ok(EXIT_OK)
        }
        Cmd::Gradcheck { scope, threshold } => {
            let t = threshold.unwrap_or(scope.threshold());
            let (table, ok) = commands::gradcheck(scope, t)?;
            print!("{table}");
            Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Cmd::SweepAlpha { alphas, cfg } => {
            let base = RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            let (_, table) = commands::sweep_alpha(&base, &commands::parse_alphas(&alphas)?)?;
            print!("{table}");
            Ok(EXIT_OK)
        }
        Cmd::Info { preset, cfg, size } => {
            let model = if cfg.config.is_some() || !cfg.overrides.is_empty() {
                RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?
                    .effective()
                    .0
            } else {
                match preset.as_str() {
                    "paper" => ModelConfig::paper(),
                    "toy" => ModelConfig::toy(),
                    p => return Err(restore_core::Error::Config(format!("unknown preset {p:?}"))),
                }
            };
            print!("{}", commands::info(&model, size, size)?);
            Ok(EXIT_OK)
        }
        Cmd::Synth {
            tasks,
            per_task,
            crop,
            seed,
            out,
        } => {
            let n = commands::synth(&SynthArgs {
                tasks: commands::parse_task_list(&tasks)?,
                per_task,
                crop,
                seed,
                out_dir: out.clone(),
            })?;
            println!("wrote {n} pairs to {}", out.display());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
