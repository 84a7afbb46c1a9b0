//! `mvdiff`: desk-scale multi-view sprite diffusion. Every subcommand
//! reads a flat `key = value` config (all keys optional), writes a run
//! directory under the run root, and snapshots its resolved configuration
//! there so any run can be reproduced from its own artifacts.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mvdiff::config::Config;
use run::Workspace;

#[derive(Parser)]
#[command(name = "mvdiff", version, about = "pose-guided multi-view sprite synthesis")]
struct Cli {
    /// Flat `key = value` config file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.steps=200` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Shorthand for `--set seed=N`
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory that receives run directories [default: ./runs]
    #[arg(long, global = true, env = "MVDIFF_RUN_ROOT", value_name = "DIR")]
    run_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural sprite corpus
    GenData,
    /// Pretrain and freeze the semantic encoder, image VAE, and pose MLP
    PretrainBackbones,
    /// Stage one: fit the appearance prior over frozen view embeddings
    TrainApm,
    /// Stage two: fit the joint denoiser (variant selected by `flags`)
    TrainJcdm,
    /// Synthesize target views for held-out subjects
    Sample {
        /// Reference views per case (shorthand for sample.refs)
        #[arg(long)]
        refs: Option<usize>,
        /// Target views per case (shorthand for sample.targets)
        #[arg(long)]
        targets: Option<usize>,
        /// Guidance weight (shorthand for sample.w)
        #[arg(long)]
        w: Option<f32>,
        /// Sampler steps (shorthand for sample.steps)
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a sample run against ground truth; write reports and plots
    Eval,
    /// Train, sample, and score several ablation variants in one run
    Ablate {
        /// Comma-separated variants [default: B0,B1,B2,full]
        #[arg(long, value_delimiter = ',')]
        flags: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> mvdiff::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::empty(),
    };
    for spec in &cli.overrides {
        cfg.set_override(spec)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    let ws = Workspace::new(cli.run_root);
    match cli.command {
        Cmd::GenData => commands::gen_data(&ws, cfg),
        Cmd::PretrainBackbones => commands::pretrain_backbones(&ws, cfg),
        Cmd::TrainApm => commands::train_apm_cmd(&ws, cfg),
        Cmd::TrainJcdm => commands::train_jcdm_cmd(&ws, cfg),
        Cmd::Sample {
            refs,
            targets,
            w,
            steps,
        } => {
            if let Some(v) = refs {
                cfg.set("sample.refs", &v.to_string())?;
            }
            if let Some(v) = targets {
                cfg.set("sample.targets", &v.to_string())?;
            }
            if let Some(v) = w {
                cfg.set("sample.w", &v.to_string())?;
            }
            if let Some(v) = steps {
                cfg.set("sample.steps", &v.to_string())?;
            }
            commands::sample_cmd(&ws, cfg)
        }
        Cmd::Eval => commands::eval_cmd(&ws, cfg),
        Cmd::Ablate { flags } => commands::ablate_cmd(&ws, cfg, &flags),
    }
}
