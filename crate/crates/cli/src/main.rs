//! `ragline` operator command line.

mod ask;
mod corpus;
mod error;
mod eval;
mod export;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "ragline", version, about = "Document-grounded question answering: ingest, index, serve, ask, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract and chunk a corpus into a JSON Lines chunks file
    Ingest(corpus::IngestArgs),
    /// Embed a chunks file into a flat index file
    Index(corpus::IndexArgs),
    /// Run the HTTP service
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// One-shot query: prints the sources, then the streamed answer
    Ask(ask::AskArgs),
    /// Likert reports and round comparisons
    #[command(subcommand)]
    Eval(eval::EvalCommand),
    /// Dump stored interactions and feedback
    Export(export::ExportArgs),
}

fn init_logging(default: &str) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::io)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(args) => corpus::ingest(args),
        Command::Index(args) => corpus::index(args),
        Command::Serve { config } => {
            init_logging("info");
            let config = ragline_service::ServiceConfig::load(&config)?;
            runtime()?.block_on(ragline_service::run(config)).map_err(|e| match e {
                ragline_service::RunError::Startup(s) => s.into(),
                ragline_service::RunError::Io(io) => CliError::io(io),
            })
        }
        Command::Ask(args) => runtime()?.block_on(ask::run(args)),
        Command::Eval(cmd) => eval::run(cmd),
        Command::Export(args) => export::run(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return CliError::usage(first.trim_start_matches("error: ")).report();
        }
    };
    if !matches!(cli.command, Command::Serve { .. }) {
        init_logging("warn");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
