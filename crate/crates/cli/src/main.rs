mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lesionattn::Error;
use serde_json::json;

use crate::commands::Ctx;
use crate::config::CliConfig;

#[derive(Parser, Debug)]
#[command(name = "lesionattn", version, about = "Fairness-aware lesion classification with attention guidance")]
struct Cli {
    /// Root for every relative path, including --config.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// TOML config; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with a planted background shortcut.
    Generate(commands::GenerateArgs),
    /// Convert a metadata CSV plus image folders into a dataset directory.
    Ingest(commands::IngestArgs),
    /// Stratified train/validation/test assignment.
    Split(commands::SplitArgs),
    /// Train one run, resuming it if its directory already holds state.
    Train(commands::TrainArgs),
    /// Train every grid point and seed, then emit Pareto candidates.
    Gridsearch(commands::GridArgs),
    /// Score a trained model on one split part.
    Evaluate(commands::EvaluateArgs),
    /// Pick one candidate from the Pareto frontier and print its id.
    Select(commands::SelectArgs),
    /// Attention/lesion IoU statistics and heatmap overlays.
    AttnAudit(commands::AuditArgs),
    /// ROC and precision-recall curves from a predictions CSV.
    Plot(commands::PlotArgs),
    /// Bundle run reports, comparisons and artifacts into one JSON file.
    Report(commands::ReportArgs),
}

fn run(cli: Cli) -> lesionattn::Result<()> {
    let config = match &cli.config {
        Some(p) => CliConfig::load(&cli.workdir.join(p))?,
        None => CliConfig::default(),
    };
    let ctx = Ctx {
        workdir: cli.workdir,
        config,
    };
    match &cli.command {
        Command::Generate(a) => commands::generate(&ctx, a),
        Command::Ingest(a) => commands::ingest(&ctx, a),
        Command::Split(a) => commands::split(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Gridsearch(a) => commands::gridsearch(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Select(a) => commands::select(&ctx, a),
        Command::AttnAudit(a) => commands::attn_audit(&ctx, a),
        Command::Plot(a) => commands::plot(&ctx, a),
        Command::Report(a) => commands::report(&ctx, a),
    }
}

fn error_json(e: &Error) -> String {
    json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
