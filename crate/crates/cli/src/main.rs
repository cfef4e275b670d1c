use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use multitag::training::Algorithm;

mod commands;
mod config;

use config::ConfigError;

/// Environment variable controlling log verbosity (`error` … `trace`).
const LOG_ENV: &str = "MULTITAG_LOG";

#[derive(Parser)]
#[command(
    name = "multitag",
    version,
    about = "Multi-task sequence tagging with a shared encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    /// Pool and shuffle every task's batches each epoch.
    Merged,
    /// Train one task per epoch, round-robin.
    Ordered,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Merged => Algorithm::MergedShuffle,
            AlgorithmArg::Ordered => Algorithm::DatasetOrdered,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config; writes checkpoint, metrics and dev-F1 curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        algorithm: Option<AlgorithmArg>,
        #[arg(long)]
        freeze_encoder: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a CoNLL corpus; prints a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        task: String,
        /// Write `token gold predicted` columns here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Tag whitespace-tokenized sentences read from stdin, one per line.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
    },
    /// Build a checkpoint from a safetensors archive and a name mapping.
    Import {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic two-task corpus and a quickstart config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            algorithm,
            freeze_encoder,
            seed,
        } => commands::train(
            &config,
            commands::TrainOverrides {
                algorithm: algorithm.map(Into::into),
                freeze_encoder,
                seed,
            },
        ),
        Command::Eval {
            checkpoint,
            corpus,
            task,
            dump,
        } => {
            let report = commands::eval(&checkpoint, &corpus, &task, dump.as_deref())?;
            writeln!(io::stdout(), "{}", serde_json::to_string_pretty(&report)?)?;
            Ok(())
        }
        Command::Predict { checkpoint, task } => {
            commands::predict(&checkpoint, &task, io::stdin().lock(), io::stdout().lock())
        }
        Command::Import { archive, map, out } => commands::import(&archive, &map, &out),
        Command::Synth { out, seed, epochs } => commands::synth(&out, seed, epochs).map(|_| ()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.downcast_ref::<ConfigError>().is_some()
        || matches!(
            err.downcast_ref::<multitag::Error>(),
            Some(multitag::Error::Config(_))
        );
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed downstream pipe (`| head`) is not a failure.
        Err(err)
            if err
                .downcast_ref::<io::Error>()
                .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
