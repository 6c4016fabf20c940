use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use fedaf_cli::config::{resolve_output, RunConfig, SchemaError};
use fedaf_cli::{report, runner};

/// Federated learning simulator: FedAF with collaborative data condensation,
/// plus FedAvg, FedProx and FedDM baselines.
#[derive(Parser)]
#[command(name = "fedaf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment. Trailing `--section.key=value` (or `--key value` for
    /// unambiguous keys) flags override the file.
    Run {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Compare finished runs, grouped by (algorithm, alpha, ipc).
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for report.csv and curves.csv.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Print per-client per-class sample counts of the configured partition.
    InspectPartition {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, overrides } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let dir = cfg.output_dir();
            let summary = runner::run(&cfg, &dir)?;
            println!(
                "{}: final accuracy {:.4}, best {:.4} (round {}), {} bytes ({:.2} MiB) -> {}",
                summary.algorithm,
                summary.final_accuracy,
                summary.best_accuracy,
                summary.best_round,
                summary.total_bytes,
                summary.total_mib,
                dir.display()
            );
        }
        Command::Report { runs, out } => {
            let data = runs.iter().map(|d| report::load_run(d)).collect::<Result<Vec<_>>>()?;
            let rep = report::build(&data)?;
            let out = resolve_output(&out);
            report::write(&rep, &out)?;
            print!("{}", report::render(&rep));
        }
        Command::InspectPartition { config, overrides } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let (train, _) = runner::load_data(&cfg)?;
            let shards = runner::partition(&cfg, &train)?;
            print!("{}", runner::partition_table(&shards, train.classes()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<SchemaError>() => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
