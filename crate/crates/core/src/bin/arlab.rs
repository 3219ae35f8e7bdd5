use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use arlab::evaluation::Distance;
use arlab::runner::{cmd_eval, cmd_report, cmd_theory, cmd_train, ExperimentConfig, TrainOptions};
use arlab::Error;

#[derive(Parser)]
#[command(
    name = "arlab",
    version,
    about = "Train, evaluate and check alignment-regularized augmentation runs"
)]
struct Cli {
    /// Worker threads for sweep cells (default: serial).
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
    /// Train with this single seed instead of the configured ones.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every sweep cell of a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score saved weights; prints the report as JSON.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        /// `minidigits:<seed>:<n>[:<classes>]` or `idx:<images>:<labels>[:<limit>]`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        family: String,
        #[arg(long, value_enum, default_value = "logits")]
        distance: DistanceArg,
    },
    /// Assumption checks and bound terms for saved weights, as JSON.
    Theory {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        family: String,
        /// Data for the empirical bound terms; defaults to `--data`.
        #[arg(long)]
        train_data: Option<String>,
    },
    /// Merge run directories into one summary table.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the long-form CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DistanceArg {
    Logits,
    Softmax,
}

impl From<DistanceArg> for Distance {
    fn from(d: DistanceArg) -> Self {
        match d {
            DistanceArg::Logits => Distance::Logits,
            DistanceArg::Softmax => Distance::Softmax,
        }
    }
}

/// Writes `text` and a newline to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), Error> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config } => {
            let config = ExperimentConfig::load(&config)?;
            let opts = TrainOptions {
                threads: cli.parallel,
                seed: cli.seed,
                ..TrainOptions::from_env()
            };
            let out = cmd_train(&config, &opts)?;
            let failed = out.record.cells.iter().filter(|c| c.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed; see runs.json", out.record.cells.len());
            }
            emit(&out.table.to_markdown())?;
            emit(&format!("run directory: {}", out.run_dir.display()))?;
        }
        Command::Eval {
            weights,
            data,
            family,
            distance,
        } => {
            let report = cmd_eval(&weights, &data, &family, distance.into())?;
            emit(&serde_json::to_string_pretty(&report)?)?;
        }
        Command::Theory {
            weights,
            data,
            family,
            train_data,
        } => {
            let report = cmd_theory(&weights, &data, &family, train_data.as_deref())?;
            emit(&serde_json::to_string_pretty(&report)?)?;
        }
        Command::Report { dirs, csv } => {
            let table = cmd_report(&dirs)?;
            if let Some(path) = csv {
                std::fs::write(&path, table.to_csv()?).map_err(|source| Error::Path { path, source })?;
            }
            emit(&table.to_markdown())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
