//! `cxrlab`: ingest reports, build reference standards, validate and refine
//! the labeler prompt, and benchmark report generators.
//!
//! Exit codes: 0 ok, 1 I/O, 2 input validation, 3 backend failure,
//! 4 gate failure (`validate --strict`, `optimize`).

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{CliConfig, FileConfig, Overrides};

#[derive(Debug, Parser)]
#[command(name = "cxrlab", version, about = "Chest X-ray report labeling and evaluation")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, env = "CXRLAB_CONFIG")]
    config: Option<PathBuf>,
    /// Directory holding the corpus store, prompts, runs and leaderboard.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["mock", "http"])]
    backend: Option<String>,
    /// Chat completions URL for `--backend http`.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// Labeler requests in flight.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Seed for `split` and `synth`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    accuracy_threshold: Option<f64>,
    #[arg(long, global = true)]
    kappa_threshold: Option<f64>,
    #[arg(long, global = true)]
    max_failure_fraction: Option<f64>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read JSONL or CSV reports into the corpus store.
    Ingest(commands::IngestArgs),
    /// Write a seeded synthetic cohort with reader annotations.
    Synth(commands::SynthArgs),
    /// Assign disjoint cohorts to corpus reports.
    Split(commands::SplitArgs),
    /// Label a cohort with a prompt version.
    Label(commands::LabelArgs),
    /// Majority-vote reader annotations into a reference standard.
    Aggregate(commands::AggregateArgs),
    /// Pairwise inter-reader kappa per label.
    Agreement(commands::AgreementArgs),
    /// Create the prompt registry with its root version.
    InitPrompt,
    /// Derive a prompt version from revisions.
    Refine(commands::RefineArgs),
    /// Freeze a prompt version for benchmarking.
    Freeze(VersionArg),
    /// List prompt versions.
    Prompts,
    /// Validate the labeler against a reference standard.
    Validate(commands::ValidateArgs),
    /// List the mismatches of a validation run.
    Triage(commands::TriageArgs),
    /// Score generated reports with a frozen prompt.
    Benchmark(commands::BenchmarkArgs),
    /// Per-label F1 change between two runs with exact McNemar tests.
    Compare(commands::CompareArgs),
    /// Run the refinement loop with scripted revision batches.
    Optimize(commands::OptimizeArgs),
    /// Serve the HTTP API over the working directory.
    Serve(commands::ServeArgs),
}

#[derive(Debug, Args)]
struct VersionArg {
    #[arg(long)]
    version: u32,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| level.into());
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let file = match cli.config.as_deref().map(FileConfig::load).transpose() {
        Ok(file) => file.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.code);
        }
    };
    let cfg = CliConfig::resolve(
        file,
        Overrides {
            workdir: cli.workdir,
            backend: cli.backend,
            endpoint: cli.endpoint,
            model: cli.model,
            parallelism: cli.parallelism,
            seed: cli.seed,
            accuracy_threshold: cli.accuracy_threshold,
            kappa_threshold: cli.kappa_threshold,
            max_failure_fraction: cli.max_failure_fraction,
        },
    );
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(&cfg, a),
        Command::Synth(a) => commands::synth(&cfg, a),
        Command::Split(a) => commands::split(&cfg, a),
        Command::Label(a) => commands::label(&cfg, a),
        Command::Aggregate(a) => commands::aggregate(&cfg, a),
        Command::Agreement(a) => commands::agreement(a),
        Command::InitPrompt => commands::init_prompt(&cfg),
        Command::Refine(a) => commands::refine(&cfg, a),
        Command::Freeze(a) => commands::freeze(&cfg, a.version),
        Command::Prompts => commands::prompts(&cfg),
        Command::Validate(a) => commands::validate(&cfg, a),
        Command::Triage(a) => commands::triage(&cfg, a),
        Command::Benchmark(a) => commands::benchmark(&cfg, a),
        Command::Compare(a) => commands::compare(&cfg, a),
        Command::Optimize(a) => commands::optimize(&cfg, a),
        Command::Serve(a) => commands::serve(&cfg, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.code == 0 => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
