use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ldpfl_cli::{cmd_partition_report, cmd_run, cmd_sweep, parse_values, SweepAxis};

/// Model poisoning experiments on federated learning with local differential privacy.
///
/// Set LDPFL_LOG (e.g. `info`, `debug`) for progress output on stderr.
#[derive(Parser)]
#[command(name = "ldpfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `global_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the experiment once per value of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-client label histograms as CSV.
    PartitionReport {
        #[arg(long)]
        config: PathBuf,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LDPFL_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed } => cmd_run(&config, &out, seed).map(|s| {
            println!(
                "{} {} {} {}: final error rate {:.4}",
                s.protocol, s.dataset, s.aggregation, s.attack, s.final_error_rate
            );
        }),
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => parse_values(&values)
            .and_then(|v| cmd_sweep(&config, axis, &v, &out))
            .map(|rows| {
                for r in rows {
                    println!("{}={}: final error rate {:.4}", axis.name(), r.value, r.final_error_rate);
                }
            }),
        Command::PartitionReport { config, out } => cmd_partition_report(&config, out.as_deref()).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
