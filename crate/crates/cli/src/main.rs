use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wus_cli::config::DATA_ROOT_ENV;
use wus_cli::{compare, runner, CliError, ExperimentConfig};
use wus_core::controller::Variant;

#[derive(Parser)]
#[command(name = "wus", version, about = "Train with weight update skipping and compare against baseline runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train `repeats` seeded runs of one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline plus one run set per skipped-layer depth.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate finished runs; the first directory is the baseline.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_data_root(std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from));
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            variant,
            out,
        } => {
            let mut cfg = load(&config, out)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(v) = variant {
                cfg.controller.variant = v;
            }
            let artifacts = runner::run(&cfg)?;
            let s = &artifacts.summary;
            println!(
                "{} x{}: {:.2} s total, {:.2} s backward, val acc {:.2}% (±{:.2}), updates -{:.2}%, {:.1} WUS epochs",
                s.variant,
                s.repeats,
                s.mean_total_wall_seconds,
                s.mean_backward_wall_seconds,
                s.mean_final_val_accuracy,
                s.std_final_val_accuracy,
                s.mean_update_reduction_percent,
                s.mean_wus_epochs
            );
            println!("wrote {}", artifacts.dir.display());
        }
        Command::Sweep { config, k, out } => {
            let cfg = load(&config, out)?;
            let report = runner::sweep_layers(&cfg, &k)?;
            print!("{}", report.to_table());
        }
        Command::Compare { dirs, json } => {
            let report = compare::compare(&dirs)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Core(e.into()))?);
            } else {
                print!("{}", report.to_table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
