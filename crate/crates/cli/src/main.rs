use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anneal_bound_cli::config::RunConfig;
use anneal_bound_cli::{runner, selftest};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

/// Annealing calculation-time bound experiments.
///
/// Exit status: 0 when every requested check passes, 2 when an inequality
/// check fails, 1 on any execution or configuration error.
#[derive(Parser)]
#[command(name = "anneal-bound", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run or sweep described by a JSON config.
    Run {
        config: PathBuf,
        /// Maximum number of sweep points evaluated concurrently.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory; overrides `outputs.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in analytic battery.
    Selftest {
        #[arg(long, hide = true, default_value_t = 1.0)]
        inject_tolerance: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Sequential dense kernels keep results bit-identical across runs.
    faer::set_global_parallelism(faer::Par::Seq);

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };

    match cli.command {
        Command::Run { config, jobs, out } => {
            let cfg = match RunConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: invalid config {}: {e}", config.display());
                    return ExitCode::from(1);
                }
            };
            match runner::execute(&cfg, out.as_deref(), jobs) {
                Ok(summary) => {
                    let _ = runner::print_summary(&summary, io::stdout().lock());
                    ExitCode::from(summary.exit_code())
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Selftest { inject_tolerance } => match selftest::run(io::stdout().lock(), inject_tolerance) {
            Ok(true) => ExitCode::SUCCESS,
            _ => ExitCode::from(1),
        },
    }
}
