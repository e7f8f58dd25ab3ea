use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use riemopt::config::parse_config;
use riemopt::{suites, train, Error};

#[derive(Parser)]
#[command(name = "riemopt", version, about = "Train networks with manifold-constrained weights")]
struct Cli {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file and write metrics.csv and checkpoint.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a verification suite.
    Check {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(suites::SUITES))]
        suite: String,
    },
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train { config } => {
            let mut cfg = parse_config(&config).map_err(|e| match e {
                Error::Io(io) => Error::Validation {
                    field: "config".into(),
                    message: format!("{}: {io}", config.display()),
                },
                e => e,
            })?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(out) = cli.out {
                cfg.output_dir = out;
            }
            let outcome = train::run_training(&cfg)?;
            if let Some(last) = outcome.records.last() {
                let acc = last.accuracy.map(|a| format!(" accuracy {a:.4}")).unwrap_or_default();
                println!(
                    "epoch {} loss {:.6e} residual {:.3e}{acc}",
                    last.epoch, last.loss, last.constraint_residual
                );
            }
            println!("wrote {}", cfg.output_dir.display());
            Ok(true)
        }
        Command::Check { suite } => {
            let report = suites::run(&suite)?;
            for check in &report.checks {
                println!("{check}");
            }
            println!(
                "{} {} in {:.2} s",
                report.suite,
                if report.passed() { "passed" } else { "FAILED" },
                report.elapsed.as_secs_f64()
            );
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}
