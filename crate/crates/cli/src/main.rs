use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flosslab::experiments::Preset;
use flosslab_cli::config::validate_text;
use flosslab_cli::{report, run, CliError, ExperimentConfig, RunOptions, WORKERS_ENV};

#[derive(Parser)]
#[command(name = "flosslab", version, about = "Gradient flossing experiments for recurrent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write a result bundle.
    Run {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds, replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Parallel seed workers.
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
        /// Output directory, replacing the config's.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Reuse finished seed shards and training checkpoints.
        #[arg(long)]
        resume: bool,
        /// Also write SVG plots and report.md.
        #[arg(long)]
        plots: bool,
    },
    /// Check a config without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Verify a bundle and write SVG plots plus a markdown summary.
    Report {
        /// Bundle directory.
        #[arg(long)]
        output: PathBuf,
    },
    /// List the available presets.
    ListPresets,
}

fn read(path: &PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            seeds,
            workers,
            output,
            resume,
            plots,
        } => {
            let cfg = ExperimentConfig::parse(&read(&config)?)?;
            let opts = RunOptions {
                seeds,
                output,
                workers,
                resume,
                plots,
            };
            let (dir, manifest) = run(&cfg, &opts)?;
            println!(
                "{}: {} seed(s), {} file(s), {:.1} s -> {}",
                manifest.name,
                manifest.seeds.len(),
                manifest.files.len(),
                manifest.wall_clock_seconds,
                dir.display()
            );
        }
        Command::Validate { config } => {
            let issues = validate_text(&read(&config)?);
            if !issues.is_empty() {
                return Err(CliError::Validation(issues));
            }
            println!("{}: ok", config.display());
        }
        Command::Report { output } => {
            let summary = report(&output)?;
            for v in &summary.verdicts {
                println!("{}", v.line());
            }
            println!("{} plot(s), summary in {}", summary.plots.len(), summary.markdown.display());
        }
        Command::ListPresets => {
            for p in Preset::ALL {
                println!("{:<20} {}", p.name(), p.summary());
                println!("{:<20} outputs: {}", "", p.outputs().join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
