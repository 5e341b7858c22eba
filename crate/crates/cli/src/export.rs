use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::Args;
use ragline_core::{ExportFormat, FeedbackStore};

use crate::error::{CliError, Result};

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("what").required(true).args(["all", "session"]))]
pub struct ExportArgs {
    #[arg(long)]
    store: PathBuf,
    /// Every interaction with its current rating, as JSON Lines
    #[arg(long)]
    all: bool,
    /// One session as a printable document
    #[arg(long)]
    session: Option<String>,
    #[arg(long, default_value = "html")]
    format: String,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: ExportArgs) -> Result<()> {
    crate::corpus::require_file(&args.store, "store")?;
    let store = FeedbackStore::open(&args.store)?;
    let bytes = match &args.session {
        Some(session) => {
            let format: ExportFormat = args.format.parse().map_err(CliError::usage)?;
            store.export_history(session, format)?
        }
        None => {
            let mut buf = Vec::new();
            for rec in store.export_all()? {
                serde_json::to_writer(&mut buf, &rec).map_err(CliError::io)?;
                buf.push(b'\n');
            }
            buf
        }
    };
    match &args.out {
        Some(path) => std::fs::write(path, &bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?,
        None => {
            let mut out = BufWriter::new(std::io::stdout().lock());
            out.write_all(&bytes)?;
            out.flush()?;
        }
    }
    Ok(())
}
