//! `tg`: train the softmax-regression walkthrough and inspect graphs.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 runtime.

mod error;
mod graph;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train softmax regression with gradient descent.
    Train(train::TrainArgs),
    /// Run graph passes on serialized graphs.
    Graph {
        #[command(subcommand)]
        command: graph::GraphCommand,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for tensorgraph::DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => tensorgraph::DType::F32,
            DTypeArg::F64 => tensorgraph::DType::F64,
        }
    }
}

/// Where a command writes its main output; stdout when unset.
#[derive(Debug, Clone, clap::Args)]
pub struct OutputArg {
    /// Write the result to this file instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

impl OutputArg {
    pub fn emit(&self, bytes: &[u8]) -> Result<(), CliError> {
        use std::io::Write;
        match &self.output {
            Some(path) => std::fs::write(path, bytes).map_err(|e| CliError::io(path, e)),
            None => std::io::stdout()
                .lock()
                .write_all(bytes)
                .map_err(|e| CliError::Runtime(format!("stdout: {e}"))),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Train(args) => train::run(args),
        Command::Graph { command } => graph::run(command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
