//! Scenario-driven command line front end for the rtbridge runtime.
//!
//! Exit codes: 0 success, 1 scenario error, 2 invariant violation.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use rtbridge::{emit_stats, run_scenario, Runtime, ScenarioConfig};

mod selftest;

#[derive(Parser)]
#[command(name = "rtbridge", about = "Cross-runtime object bridge scenario driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script against a fresh runtime.
    Run {
        /// Scenario file (one command per line; `#` comments).
        scenario: PathBuf,
        /// Seed for randomized property scenarios.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deterministic golden output: scenario output lines only.
        #[arg(long)]
        golden: bool,
        /// Append the key-sorted counter block after the output.
        #[arg(long)]
        stats: bool,
        /// Register extra extension descriptor files before running.
        #[arg(long = "extension")]
        extensions: Vec<PathBuf>,
        /// Drain finalizables from a daemon poller thread at this cadence
        /// instead of explicit gc-drain commands only.
        #[arg(long)]
        poller_ms: Option<u64>,
    },
    /// Run the built-in randomized property checks.
    Selftest {
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List registered extensions.
    ListExtensions,
}

fn run() -> Result<ExitCode, String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            seed,
            golden,
            stats,
            extensions,
            poller_ms,
        } => {
            let text = std::fs::read_to_string(&scenario)
                .map_err(|e| format!("cannot read {}: {e}", scenario.display()))?;
            let rt = Runtime::new();
            for path in &extensions {
                let ext_text = std::fs::read_to_string(path)
                    .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                rt.register_extension_text(&ext_text)
                    .map_err(|e| e.to_string())?;
            }
            if let Some(ms) = poller_ms {
                rt.start_poller(Duration::from_millis(ms));
            }
            let config = ScenarioConfig {
                seed,
                golden,
                base_dir: scenario
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            let report = run_scenario(&rt, &text, &config).map_err(|e| e.to_string())?;
            rt.stop_poller();
            for line in &report.output {
                println!("{line}");
            }
            if stats && !golden {
                print!("{}", emit_stats(&rt.stats_snapshot(), false));
            } else if stats {
                print!("{}", emit_stats(&report.stats, true));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { iterations, seed } => {
            let failures = selftest::run_all(iterations, seed);
            if failures == 0 {
                Ok(ExitCode::SUCCESS)
            } else {
                Err(format!("{failures} selftest check(s) failed"))
            }
        }
        Command::ListExtensions => {
            let rt = Runtime::new();
            for (name, functions, types) in rt.list_extensions() {
                println!("{name}: {functions} function(s), {types} type(s)");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match std::panic::catch_unwind(run) {
        Ok(Ok(code)) => code,
        Ok(Err(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            eprintln!("fatal: {msg}");
            ExitCode::from(2)
        }
    }
}
