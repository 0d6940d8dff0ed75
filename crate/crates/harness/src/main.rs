use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedacnnl_harness::config::{Algorithm, ExperimentConfig};
use fedacnnl_harness::runner::{build_scenario, oracle_check, run_scenario, write_outputs, RunError};

/// Federated closed-form training experiments.
#[derive(Parser)]
#[command(name = "fedacnnl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics, summary, trace and weights.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// acnnl, fedacnnl, pfedacnnl or fedavg.
        #[arg(long)]
        algo: Option<String>,
    },
    /// Parse and check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare federated weights with centralized training on the same data.
    OracleCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
}

fn load(path: &std::path::Path) -> Result<ExperimentConfig, RunError> {
    Ok(ExperimentConfig::load(path)?)
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run { config, out, seed, algo } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(a) = algo {
                cfg.algorithm = Algorithm::parse(&a).ok_or_else(|| {
                    RunError::Config(fedacnnl_harness::config::ConfigError {
                        line: None,
                        message: format!("unknown algorithm `{a}`"),
                    })
                })?;
            }
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let sc = build_scenario(&cfg)?;
            let report = run_scenario(&cfg, &sc)?;
            write_outputs(&report, &dir, cfg.output.weights, cfg.output.trace)?;
            let s = &report.summary;
            println!(
                "{} seed={} clients={} rounds={} acc={:.4} idle={:.4}s -> {}",
                s.algorithm,
                s.seed,
                s.clients,
                s.rounds,
                s.acc_overall,
                s.total_idle_s,
                dir.display()
            );
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!("ok: {} on {} clients", cfg.algorithm.name(), cfg.partition.clients);
            Ok(())
        }
        Command::OracleCheck { config, tolerance } => {
            let cfg = load(&config)?;
            let sc = build_scenario(&cfg)?;
            let r = oracle_check(&cfg, &sc)?;
            for (l, d) in r.per_layer.iter().enumerate() {
                println!("layer {l}: relative deviation {d:.3e}");
            }
            println!("clients={} max_deviation={:.3e}", r.clients, r.max_deviation);
            if r.max_deviation < tolerance {
                Ok(())
            } else {
                Err(RunError::Core(fedacnnl_core::Error::Numeric(format!(
                    "deviation {:.3e} exceeds {tolerance:e}",
                    r.max_deviation
                ))))
            }
        }
    }
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
