//! `ram`: synthetic data generation, staged training, feature extraction
//! and re-identification evaluation.
//!
//! Failures print one JSON object `{"error": {"category", "message"}}` on
//! stderr and exit with the category's code (see [`exit_code`]).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ram_core::config::RunConfig;
use ram_core::RamError;

#[derive(Parser)]
#[command(name = "ram", version, about = "Region-aware multi-branch vehicle re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (`run.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct EvalFlags {
    /// Comma-separated feature selections, e.g. `f_c,[f_c;f_b;f_r;f_a]`.
    #[arg(long)]
    selections: Option<String>,
    /// `fixed_split` or `random_gallery`.
    #[arg(long)]
    protocol: Option<String>,
    /// Trials for `random_gallery`.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (images, manifest.csv, spec echo).
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staged training plan and write one checkpoint per stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Last stage to run: baseline (conv-only), bn, bn+r or ram.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write one feature table per selection for the evaluation images.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        selections: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a checkpoint for each selection and write a comparison table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train every stage and tabulate each checkpoint's features.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stage: Option<String>,
        /// Dataset to use; a synthetic one is generated under `--out` if absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 2,
        "parse" => 3,
        "io" => 4,
        "data" => 5,
        "model" => 6,
        "eval" => 7,
        "shape" => 8,
        "autograd" => 9,
        _ => 1,
    }
}

fn resolve(common: &Common, mut extra: Vec<(String, String)>) -> Result<RunConfig, RamError> {
    let mut overrides = Vec::new();
    if let Some(seed) = common.seed {
        overrides.push(("run.seed".to_string(), seed.to_string()));
    }
    overrides.append(&mut extra);
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| RamError::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn push_opt(out: &mut Vec<(String, String)>, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        out.push((key.to_string(), v.to_string()));
    }
}

fn eval_overrides(e: &EvalFlags) -> Vec<(String, String)> {
    let mut o = Vec::new();
    push_opt(&mut o, "eval.selections", e.selections.as_ref());
    push_opt(&mut o, "eval.protocol", e.protocol.as_ref());
    push_opt(&mut o, "eval.trials", e.trials);
    o
}

fn manifest_override(m: &Option<PathBuf>) -> Vec<(String, String)> {
    m.iter().map(|p| ("data.manifest".to_string(), p.display().to_string())).collect()
}

fn run(cli: Cli) -> Result<(), RamError> {
    match cli.command {
        Command::GenSynthetic { common, out } => {
            let cfg = resolve(&common, Vec::new())?;
            commands::gen_synthetic(&cfg, &out)
        }
        Command::Train { common, out, stage, manifest } => {
            let mut o = manifest_override(&manifest);
            push_opt(&mut o, "train.stage", stage);
            let cfg = resolve(&common, o)?;
            commands::train(cfg, &out)
        }
        Command::Extract { common, checkpoint, out, selections, manifest } => {
            let mut o = manifest_override(&manifest);
            push_opt(&mut o, "eval.selections", selections);
            let cfg = resolve(&common, o)?;
            commands::extract(&cfg, &checkpoint, &out)
        }
        Command::Evaluate { common, eval, checkpoint, out, manifest } => {
            let mut o = manifest_override(&manifest);
            o.extend(eval_overrides(&eval));
            let cfg = resolve(&common, o)?;
            commands::evaluate(&cfg, &checkpoint, &out)
        }
        Command::Ablate { common, eval, out, stage, manifest } => {
            let mut o = manifest_override(&manifest);
            o.extend(eval_overrides(&eval));
            push_opt(&mut o, "train.stage", stage);
            let cfg = resolve(&common, o)?;
            commands::ablate(cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let payload = serde_json::json!({
                "error": { "category": category, "message": e.to_string() }
            });
            eprintln!("{payload}");
            ExitCode::from(exit_code(category))
        }
    }
}
