use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ragline_core::ingest::{
    ingest_corpus, read_chunks_jsonl, read_manifest, scan_corpus_dir, write_chunks_jsonl, BoundaryMode,
    CommandExtractor,
};
use ragline_core::{build_index, save_index, ChunkingConfig, ProviderSpec};
use serde_json::json;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Boundary {
    Hard,
    Sentence,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus directory (.txt/.md files) or JSON manifest of {path, title?, language?}
    #[arg(long)]
    corpus: PathBuf,
    /// Output chunks file (JSON Lines)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    max_chars: usize,
    #[arg(long, default_value_t = 200)]
    overlap: usize,
    #[arg(long, value_enum, default_value_t = Boundary::Hard)]
    boundary: Boundary,
    /// External text extractor for other formats; receives the file path as its last argument
    #[arg(long)]
    extractor: Option<String>,
}

pub fn ingest(args: IngestArgs) -> Result<()> {
    let cfg = ChunkingConfig {
        max_chars: args.max_chars,
        overlap_chars: args.overlap,
        boundary_mode: match args.boundary {
            Boundary::Hard => BoundaryMode::Hard,
            Boundary::Sentence => BoundaryMode::Sentence,
        },
    };
    cfg.validate()?;
    let extractor = match &args.extractor {
        Some(cmd) => Some(CommandExtractor::parse(cmd).ok_or_else(|| CliError::usage("--extractor is empty"))?),
        None => None,
    };
    let entries = if args.corpus.is_dir() {
        scan_corpus_dir(&args.corpus, extractor.is_some())?
    } else {
        read_manifest(&args.corpus)?
    };
    let outcome = ingest_corpus(&entries, &cfg, extractor.as_ref())?;
    let file = std::fs::File::create(&args.out).map_err(|e| CliError::io(format!("{}: {e}", args.out.display())))?;
    write_chunks_jsonl(BufWriter::new(file), &outcome.chunks)?;
    let skipped: Vec<_> = outcome
        .skipped
        .iter()
        .map(|(p, why)| json!({"path": p, "reason": why}))
        .collect();
    println!(
        "{}",
        json!({
            "documents": outcome.documents.len(),
            "chunks": outcome.chunks.len(),
            "skipped": skipped,
            "replaced_sequences": outcome.replaced_sequences,
            "out": args.out,
        })
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Provider {
    Local,
    Remote,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Chunks file produced by `ingest`
    #[arg(long)]
    chunks: PathBuf,
    #[arg(long, value_enum, default_value_t = Provider::Local)]
    provider: Provider,
    /// Output index file
    #[arg(long)]
    out: PathBuf,
    /// Dimension of the local embedder
    #[arg(long, default_value_t = ragline_core::embed::DEFAULT_LOCAL_DIM)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

pub fn provider_spec(provider: Provider, dim: usize) -> ProviderSpec {
    match provider {
        Provider::Local => ProviderSpec::Local { dim },
        Provider::Remote => ProviderSpec::Remote,
    }
}

pub fn index(args: IndexArgs) -> Result<()> {
    let chunks = read_chunks_jsonl(&args.chunks)?;
    let provider = provider_spec(args.provider, args.dim).build()?;
    let report = build_index(&chunks, provider.as_ref(), args.batch_size)?;
    save_index(&report.index, &args.out)?;
    println!(
        "{}",
        json!({
            "entries": report.index.len(),
            "dim": report.index.dim(),
            "provider_id": report.index.provider_id(),
            "dropped": report.dropped,
            "out": args.out,
        })
    );
    Ok(())
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(format!("{what} {} does not exist", path.display())))
    }
}
