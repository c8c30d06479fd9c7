use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use twlr::config::RunConfig;
use twlr::pipeline::{self, PipelineError, Workspace};

/// Synthetic fundus grading, lesion localization and severity regression.
#[derive(Parser, Debug)]
#[command(name = "twlr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for relative paths in the config (default: current directory).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write the synthetic train and test splits.
    Generate,
    /// Train the model and save a checkpoint.
    Train,
    /// Run the regression loop on the test split.
    Run,
    /// Compute metrics from the run results.
    Evaluate,
    /// Render plots from the evaluation.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Run => "run",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }
}

fn workspace(cli: &Cli) -> Result<Workspace, PipelineError> {
    let mut config = match &cli.config {
        Some(p) => pipeline::load_config(p)?,
        // Without a file the seed must come from the command line.
        None => {
            let text = cli
                .seed
                .map(|s| format!("run.seed = {s}\n"))
                .unwrap_or_default();
            RunConfig::parse(&text)?
        }
    };
    if let Some(s) = cli.seed {
        config.set_seed(s);
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    let root = cli.output.clone().unwrap_or_else(|| PathBuf::from("."));
    Ok(Workspace::new(config, root))
}

fn execute(cli: &Cli) -> Result<serde_json::Value, PipelineError> {
    let ws = workspace(cli)?;
    Ok(match cli.command {
        Command::Generate => {
            let (train, test) = pipeline::cmd_generate(&ws)?;
            json!({ "data_dir": ws.data_dir(), "train": train, "test": test })
        }
        Command::Train => {
            let log = pipeline::cmd_train(&ws)?;
            json!({
                "checkpoint": ws.checkpoint(),
                "samples": log.samples,
                "initial_loss": log.initial_loss,
                "final_loss": log.epoch_losses.last(),
            })
        }
        Command::Run => {
            let entries = pipeline::cmd_run(&ws)?;
            let failed = entries.iter().filter(|e| e.error.is_some()).count();
            json!({ "output_dir": ws.output_dir(), "images": entries.len(), "failed": failed })
        }
        Command::Evaluate => {
            let r = pipeline::cmd_evaluate(&ws)?;
            json!({
                "output_dir": ws.output_dir(),
                "images": r.images,
                "grade_accuracy": r.classification.grade_accuracy,
                "kappa": r.classification.kappa,
                "reduction_curve": r.reduction_curve.values,
                "lesion_sensitivity": r.segmentation.overall_without_bg.sensitivity,
            })
        }
        Command::Report => {
            let files = pipeline::cmd_report(&ws)?;
            json!({ "plots": files })
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = json!({
                "command": cli.command.name(),
                "error": e.kind(),
                "message": e.to_string(),
                "path": e.path(),
                "details": e.details(),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
