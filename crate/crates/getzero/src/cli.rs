//! Argument parsing and dispatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io;
use crate::pipeline::{self, EvalPolicy};

#[derive(Debug, Parser)]
#[command(name = "getzero", version = io::version(), about = "Graph embodiment transformer pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory for outputs.
    #[arg(long)]
    pub out: PathBuf,
    /// Shorthand for `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// `splits.json` written by gen-embodiments.
    #[arg(long)]
    pub splits: PathBuf,
    /// Directory written by gen-demos.
    #[arg(long)]
    pub demos: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enumerate hand variants, filter them and write the four splits.
    GenEmbodiments {
        #[command(flatten)]
        common: Common,
    },
    /// Roll the expert on the training split and write the demo dataset.
    GenDemos {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        splits: PathBuf,
    },
    /// Behavior-cloning run writing best and final checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        demos: PathBuf,
        /// Shorthand for `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Closed-loop tracking error on every split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        splits: PathBuf,
        /// Training run directory; omit together with `--policy`.
        #[arg(long, required_unless_present = "policy")]
        checkpoint: Option<PathBuf>,
        /// Built-in policy instead of a checkpoint.
        #[arg(long, value_parser = ["expert", "zero"], conflicts_with = "checkpoint")]
        policy: Option<String>,
    },
    /// The seven-row ablation matrix.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// FK-head-only training scored on held-out graphs.
    FkProbe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// ET+DFS evaluated with canonical and reversed DFS order.
    DfsSensitivity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Full model trained on growing subsets of the training split.
    SizeSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
}

fn load(common: &Common, extra: Vec<String>) -> Result<RunConfig, CliError> {
    let base = match &common.config {
        Some(p) => io::read_config(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("train.seed={s}"));
    }
    overrides.extend(extra);
    base.with_overrides(&overrides)
}

/// Executes a parsed command and returns the lines to print.
pub fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    match cli.command {
        Command::GenEmbodiments { common } => pipeline::gen_embodiments(&load(&common, vec![])?, &common.out),
        Command::GenDemos { common, splits } => pipeline::gen_demos(&load(&common, vec![])?, &splits, &common.out),
        Command::Train { common, demos, steps } => {
            let extra = steps.map(|s| format!("train.steps={s}")).into_iter().collect();
            pipeline::train_cmd(&load(&common, extra)?, &demos, &common.out)
        }
        Command::Eval { common, splits, checkpoint, policy } => {
            let cfg = load(&common, vec![])?;
            let p = match (&checkpoint, policy.as_deref()) {
                (Some(dir), _) => EvalPolicy::Checkpoint(dir),
                (None, Some("expert")) => EvalPolicy::Expert,
                _ => EvalPolicy::Zero,
            };
            pipeline::eval_cmd(&cfg, &splits, p, &common.out)
        }
        Command::Ablate { common, inputs } => pipeline::ablate_cmd(&load(&common, vec![])?, &inputs.splits, &inputs.demos, &common.out),
        Command::FkProbe { common, inputs } => pipeline::fk_probe_cmd(&load(&common, vec![])?, &inputs.splits, &inputs.demos, &common.out),
        Command::DfsSensitivity { common, inputs } => {
            pipeline::dfs_sensitivity_cmd(&load(&common, vec![])?, &inputs.splits, &inputs.demos, &common.out)
        }
        Command::SizeSweep { common, inputs } => pipeline::size_sweep_cmd(&load(&common, vec![])?, &inputs.splits, &inputs.demos, &common.out),
    }
}

/// Parses `args`, runs the command and maps failures to exit codes.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
