use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use convsearch::error::{Error, Result};
use convsearch::pipeline::{self, PipelineConfig};

/// Synthetic conversational retrieval pipeline.
///
/// Any configuration field can be overridden on the command line by its
/// dotted name, e.g. `--generation.p_ps 0.5` or `--train.epochs=20`.
#[derive(Parser)]
#[command(name = "convsearch", version, about)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Override the output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Use (and create if needed) this exact run directory instead of a
    /// fresh timestamped one; existing artifacts in it enable stage skipping.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic conversations with the configured backend.
    Generate,
    /// Expand dialogues into pairs and apply round-trip consistency filtering.
    Filter,
    /// Train the final dual-encoder retriever on the kept pairs.
    Train,
    /// Build the dense index and produce a TREC run for the queries file.
    Retrieve,
    /// Score a run file against qrels.
    Evaluate,
    /// Run all stages in sequence.
    Pipeline,
}

/// Splits dotted-name overrides (`--a.b value` or `--a.b=value`) out of the
/// raw arguments so clap only sees its declared flags.
fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter().peekable();
    while let Some(arg) = iter.next() {
        let is_dotted = arg.starts_with("--") && arg[2..].contains('.');
        if !is_dotted {
            rest.push(arg);
            continue;
        }
        let body = &arg[2..];
        if let Some((key, value)) = body.split_once('=') {
            overrides.push((key.to_string(), value.to_string()));
        } else if let Some(value) = iter.next() {
            overrides.push((body.to_string(), value));
        } else {
            overrides.push((body.to_string(), String::new()));
        }
    }
    (rest, overrides)
}

fn resolve_run_dir(cli: &Cli, cfg: &PipelineConfig, fresh: bool) -> Result<PathBuf> {
    match &cli.run_dir {
        Some(dir) => pipeline::use_run_dir(cfg, dir),
        None if fresh => pipeline::prepare_run_dir(cfg),
        None => pipeline::latest_run_dir(cfg),
    }
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::validation("--config is required"))?;
    let mut cfg = pipeline::load_config(config_path, &overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(output) = &cli.output {
        cfg.output_dir = output.clone();
    }

    // Validation runs before the run directory is touched: a bad config must
    // leave no side effects behind.
    match cli.command {
        Command::Generate => {
            cfg.validate_for_generate()?;
            let run_dir = resolve_run_dir(&cli, &cfg, true)?;
            pipeline::cmd_generate(&cfg, &run_dir)?;
            println!("{}", run_dir.display());
        }
        Command::Filter => {
            cfg.validate_for_filter()?;
            let run_dir = resolve_run_dir(&cli, &cfg, false)?;
            pipeline::cmd_filter(&cfg, &run_dir)?;
            println!("{}", run_dir.display());
        }
        Command::Train => {
            cfg.validate_for_train()?;
            let run_dir = resolve_run_dir(&cli, &cfg, false)?;
            pipeline::cmd_train(&cfg, &run_dir)?;
            println!("{}", run_dir.display());
        }
        Command::Retrieve => {
            cfg.validate_for_retrieve()?;
            let run_dir = resolve_run_dir(&cli, &cfg, false)?;
            pipeline::cmd_retrieve(&cfg, &run_dir)?;
            println!("{}", run_dir.display());
        }
        Command::Evaluate => {
            cfg.validate_for_evaluate()?;
            let run_dir = resolve_run_dir(&cli, &cfg, false)?;
            let report = pipeline::cmd_evaluate(&cfg, &run_dir)?;
            print!("{}", report.to_table());
        }
        Command::Pipeline => {
            cfg.validate_for_pipeline()?;
            let run_dir = resolve_run_dir(&cli, &cfg, true)?;
            let report = pipeline::cmd_pipeline(&cfg, &run_dir)?;
            print!("{}", report.to_table());
            println!("{}", run_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = extract_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
