use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedstress::compare::{compare_rows, load_reports, render_table};
use fedstress::config::{ExperimentConfig, SyntheticOverrides};
use fedstress::report::save_rows;
use fedstress::{run, thread_count, CliError};
use fedstress_core::data::{generate_cases, save_slice_bundle};

#[derive(Parser)]
#[command(name = "fedstress", version, about = "Stress-test federated segmentation under client appearance shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured seed, level and strategy and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds; overrides the config's `seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Print robustness reports side by side, sorted by best-worst gap.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Combined CSV destination.
        #[arg(long, default_value = "comparison.csv")]
        out: PathBuf,
    },
    /// Write a synthetic slice bundle.
    GenData {
        /// JSON object with synthetic generator settings.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, out, seeds } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            let out = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("fedstress-out"));
            let manifest = run(&cfg, &out, thread_count()?)?;
            println!("{} jobs finished in {:.1}s; reports in {}", manifest.jobs.len(), manifest.total_seconds, out.display());
        }
        Command::Compare { files, out } => {
            let rows = compare_rows(load_reports(&files)?)?;
            print!("{}", render_table(&rows));
            save_rows(&rows, &out)?;
        }
        Command::GenData { config, out } => {
            let text = std::fs::read_to_string(&config).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
            let overrides: SyntheticOverrides = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
            let synthetic = overrides.resolve(0);
            synthetic.validate()?;
            let cases = generate_cases::<f32>(&synthetic)?;
            save_slice_bundle(&cases, &out)?;
            println!("wrote {} cases to {}", cases.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
