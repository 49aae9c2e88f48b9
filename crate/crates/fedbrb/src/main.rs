//! Command-line entry point for the federated-learning simulator.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedbrb::cli::{cmd_coverage, cmd_gradcheck, cmd_run};
use fedbrb::config::Overrides;

#[derive(Parser)]
#[command(
    name = "fedbrb",
    about = "Deterministic simulator for device-heterogeneous federated learning \
             with block-wise rolling and weighted broadcast"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured run grid and write metrics.csv + summary.txt.
    Run {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (beats FEDBRB_OUT and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the config's seed list (repeatable).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Run a single scheme: heterofl|fedrolex|fedbrb|feddropout.
        #[arg(long)]
        scheme: Option<String>,
        /// Run a single size distribution, e.g. a0-e1.
        #[arg(long)]
        distribution: Option<String>,
        /// Broadcast weight for fedbrb, in [0, 1).
        #[arg(long)]
        beta: Option<f64>,
        /// Size-assignment setting: dynamic|fixed.
        #[arg(long)]
        setting: Option<String>,
        /// Drop the smallest sub-models at aggregation.
        #[arg(long)]
        exclude_small: bool,
        /// Also run fedbrb without weighted broadcast for comparison.
        #[arg(long)]
        no_broadcast: bool,
    },
    /// Selection-only coverage table (no training).
    Coverage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check of the training engine.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };

    let default_out = || std::env::var_os("FEDBRB_OUT").map(PathBuf::from);

    let result = match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            scheme,
            distribution,
            beta,
            setting,
            exclude_small,
            no_broadcast,
        } => {
            let overrides = Overrides {
                out: out.or_else(default_out),
                seeds,
                scheme,
                distribution,
                beta,
                setting,
                exclude_small,
                no_broadcast,
            };
            cmd_run(&config, &overrides).map(|artifacts| {
                println!("wrote {}", artifacts.out_dir.join("metrics.csv").display());
                print!("{}", artifacts.summary);
            })
        }
        Command::Coverage { config, out } => {
            let overrides =
                Overrides { out: out.or_else(default_out), ..Default::default() };
            cmd_coverage(&config, &overrides).map(|table| print!("{table}"))
        }
        Command::Gradcheck { seed } => cmd_gradcheck(seed).map(|report| {
            println!(
                "gradient check passed: max relative error {:.3e} over {} parameters",
                report.max_rel_error, report.checked
            );
        }),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
