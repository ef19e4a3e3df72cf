use std::path::PathBuf;

use clap::{Parser, Subcommand};

use sketchfed_cli::config::load_config;
use sketchfed_cli::error::{CliError, CliResult};
use sketchfed_cli::experiment::{run_experiment, NO_ACCURACY};
use sketchfed_cli::plot::emit_plots;
use sketchfed_cli::tools::{bench_sketch, partition_preview};
use sketchfed_cli::verify::run_verification;

/// Federated training on sketched weights.
#[derive(Parser)]
#[command(name = "sketchfed", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write metrics and a summary.
    Run {
        /// Experiment config file (flat key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Root seed, overriding the config and the SKETCHFED_SEED variable.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Communication mode, `sketched` or `baseline`, overriding the config.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Run the built-in self-check battery.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Benchmark sketch and recovery throughput.
    BenchSketch {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Show how the configured dataset splits across clients.
    PartitionPreview {
        #[arg(long)]
        config: PathBuf,
        /// Partition seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render loss and accuracy charts from metrics files.
    Plot {
        /// Directory to write the SVG files into.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// One metrics.csv per run; several overlay on the same axes.
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Run { config, seed, out, mode } => {
            let mut cfg = load_config(&config)?;
            let env_seed = std::env::var("SKETCHFED_SEED").ok();
            cfg.apply_overrides(seed, env_seed.as_deref(), out, mode.as_deref())?;
            let artifacts = run_experiment(&cfg)?;
            let s = &artifacts.summary;
            println!("final loss      {:.6}", s.final_loss);
            if s.final_acc != NO_ACCURACY {
                println!("final accuracy  {:.4}", s.final_acc);
            }
            println!("compression     down {:.3}x  up {:.3}x", s.comp_ratio_down, s.comp_ratio_up);
            println!("gradient slope  {:.4}", s.convergence_slope);
            println!("metrics         {}", artifacts.metrics_path.display());
            println!("summary         {}", artifacts.summary_path.display());
            Ok(())
        }
        Command::Verify { seed } => {
            let outcomes = run_verification(seed);
            let mut failed = 0;
            for o in &outcomes {
                let status = if o.passed { "ok" } else { "FAILED" };
                println!("check {:<22} {status:<6} {}", o.name, o.detail);
                if !o.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(CliError::Numeric(format!(
                    "{failed} of {} checks failed",
                    outcomes.len()
                )));
            }
            println!("all {} checks passed", outcomes.len());
            Ok(())
        }
        Command::BenchSketch { seed } => {
            print!("{}", bench_sketch(seed));
            Ok(())
        }
        Command::PartitionPreview { config, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            print!("{}", partition_preview(&cfg)?);
            Ok(())
        }
        Command::Plot { out, csv } => {
            for path in emit_plots(&csv, &out)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
