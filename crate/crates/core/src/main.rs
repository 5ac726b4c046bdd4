use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eigenavg::cli::{compare_manifests, init_workers, run_experiment, Experiment, ExperimentConfig};
use eigenavg::Error;

/// Experiment runner for eigenfunction averages over submanifolds.
#[derive(Parser)]
#[command(name = "eigenavg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Diff two run manifests.
    Compare { a: PathBuf, b: PathBuf },
    /// List the available experiments.
    ListExperiments,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Run { config } => {
            init_workers()?;
            let cfg = ExperimentConfig::load(&config)?;
            let m = run_experiment(&cfg)?;
            for c in &m.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            for w in &m.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {} in {:.2}s", cfg.output_dir.display(), m.wall_time_s);
            Ok(if m.passed() { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Compare { a, b } => {
            let d = compare_manifests(&a, &b)?;
            if d.is_empty() {
                println!("no differences");
                return Ok(ExitCode::SUCCESS);
            }
            for f in &d.fields {
                println!("field {f}");
            }
            for f in &d.files {
                println!("file {f}");
            }
            for r in &d.drift {
                println!("drift {} row {} {}: {} vs {}", r.file, r.row, r.column, r.a, r.b);
            }
            Ok(ExitCode::from(2))
        }
        Command::ListExperiments => {
            for e in Experiment::ALL {
                println!("{:<20}{}", e.name(), e.describe());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
