//! Corpus ingestion: text extraction, chunking and provenance tagging.
//!
//! Chunk spans are measured in Unicode scalar values (`char`s), not bytes, so
//! offsets stay meaningful for Finnish and Swedish text.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("document {0} is empty after normalization")]
    EmptyDocument(PathBuf),
    #[error("chunk {chunk_id} does not belong to document {doc_id}")]
    Consistency { chunk_id: String, doc_id: String },
    #[error("invalid chunking config: {0}")]
    InvalidConfig(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("external extractor failed for {path}: {message}")]
    Extractor { path: PathBuf, message: String },
    #[error("malformed file {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, IngestError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Fi,
    Sv,
    En,
    #[default]
    Unknown,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::Fi => "fi",
            Language::Sv => "sv",
            Language::En => "en",
            Language::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fi" => Ok(Language::Fi),
            "sv" => Ok(Language::Sv),
            "en" => Ok(Language::En),
            "unknown" | "" => Ok(Language::Unknown),
            other => Err(format!("unknown language tag {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub title: String,
    pub language: Language,
    pub text: String,
    pub source_path: String,
    pub ingested_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    /// `(start_char, end_char)` into the source document text.
    pub span: (usize, usize),
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Chunk {
    pub fn make_id(doc_id: &str, ordinal: usize) -> String {
        format!("{doc_id}#{ordinal}")
    }

    pub fn title(&self) -> &str {
        self.metadata.get("title").map(String::as_str).unwrap_or("")
    }

    pub fn source_path(&self) -> &str {
        self.metadata
            .get("source_path")
            .map(String::as_str)
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    Hard,
    Sentence,
}

impl FromStr for BoundaryMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "hard" => Ok(BoundaryMode::Hard),
            "sentence" => Ok(BoundaryMode::Sentence),
            other => Err(format!("unknown boundary mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub max_chars: usize,
    pub overlap_chars: usize,
    pub boundary_mode: BoundaryMode,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            max_chars: 1000,
            overlap_chars: 200,
            boundary_mode: BoundaryMode::Hard,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_chars == 0 {
            return Err(IngestError::InvalidConfig("max_chars must be positive".into()));
        }
        if self.overlap_chars >= self.max_chars {
            return Err(IngestError::InvalidConfig(format!(
                "overlap_chars ({}) must be smaller than max_chars ({})",
                self.overlap_chars, self.max_chars
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextFormat {
    Txt,
    Md,
}

impl TextFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "txt" | "text" => Some(TextFormat::Txt),
            "md" | "markdown" => Some(TextFormat::Md),
            _ => None,
        }
    }
}

/// Result of text extraction before a document is admitted to the corpus.
#[derive(Debug, Clone)]
pub struct Extracted {
    pub document: SourceDocument,
    /// Number of invalid UTF-8 sequences replaced with U+FFFD.
    pub replaced_sequences: usize,
}

/// Extracts a built-in plain-text or markdown file.
pub fn extract_text(path: &Path, format: TextFormat) -> Result<Extracted> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (raw, replaced_sequences) = decode_lossy(&bytes);
    let text = normalize_text(&raw);
    if text.trim().is_empty() {
        return Err(IngestError::EmptyDocument(path.to_path_buf()));
    }
    let title = match format {
        TextFormat::Md => markdown_title(&text),
        TextFormat::Txt => None,
    }
    .unwrap_or_else(|| file_stem(path));
    if replaced_sequences > 0 {
        tracing::warn!(
            path = %path.display(),
            replaced_sequences,
            "invalid UTF-8 replaced during extraction"
        );
    }
    Ok(Extracted {
        document: SourceDocument {
            doc_id: make_doc_id(&bytes, path),
            title,
            language: Language::Unknown,
            text,
            source_path: path.display().to_string(),
            ingested_at: Utc::now(),
        },
        replaced_sequences,
    })
}

/// Runs an external extractor command (`<program> [args..] <path>`) and
/// treats its standard output as the document text. Used for PDF and other
/// formats the crate does not parse itself.
#[derive(Debug, Clone)]
pub struct CommandExtractor {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandExtractor {
    /// Parses a whitespace separated command line, e.g. `"pdftotext -layout"`.
    pub fn parse(command: &str) -> Option<Self> {
        let mut parts = command.split_whitespace().map(str::to_owned);
        let program = parts.next()?;
        Some(Self {
            program,
            args: parts.collect(),
        })
    }

    pub fn extract(&self, path: &Path) -> Result<Extracted> {
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(path)
            .output()
            .map_err(|e| IngestError::Extractor {
                path: path.to_path_buf(),
                message: format!("spawning {}: {e}", self.program),
            })?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(IngestError::Extractor {
                path: path.to_path_buf(),
                message: format!("{}: {}", output.status, stderr.trim()),
            });
        }
        let file_bytes = std::fs::read(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let (raw, replaced_sequences) = decode_lossy(&output.stdout);
        let text = normalize_text(&raw);
        if text.trim().is_empty() {
            return Err(IngestError::EmptyDocument(path.to_path_buf()));
        }
        Ok(Extracted {
            document: SourceDocument {
                doc_id: make_doc_id(&file_bytes, path),
                title: file_stem(path),
                language: Language::Unknown,
                text,
                source_path: path.display().to_string(),
                ingested_at: Utc::now(),
            },
            replaced_sequences,
        })
    }
}

fn decode_lossy(bytes: &[u8]) -> (String, usize) {
    let mut out = String::with_capacity(bytes.len());
    let mut replaced = 0;
    for chunk in bytes.utf8_chunks() {
        out.push_str(chunk.valid());
        if !chunk.invalid().is_empty() {
            out.push(char::REPLACEMENT_CHARACTER);
            replaced += 1;
        }
    }
    (out, replaced)
}

/// Converts CRLF / CR to LF and collapses runs of more than two blank lines
/// down to two.
pub fn normalize_text(raw: &str) -> String {
    let unified = raw.replace("\r\n", "\n").replace('\r', "\n");
    let mut out = String::with_capacity(unified.len());
    let mut newline_run = 0usize;
    for c in unified.chars() {
        if c == '\n' {
            newline_run += 1;
            // two blank lines = three consecutive newlines
            if newline_run > 3 {
                continue;
            }
        } else {
            newline_run = 0;
        }
        out.push(c);
    }
    out
}

fn markdown_title(text: &str) -> Option<String> {
    text.lines()
        .map(str::trim)
        .find_map(|l| l.strip_prefix("# "))
        .map(|t| t.trim().to_owned())
        .filter(|t| !t.is_empty())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "document".to_owned())
}

fn sanitize_stem(stem: &str) -> String {
    let s: String = stem
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '-' || c == '_' {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "doc".to_owned()
    } else {
        s
    }
}

/// First 12 hex characters of SHA-256 over the file bytes plus the sanitized
/// filename stem. `#` never appears, so chunk ids split unambiguously.
pub fn make_doc_id(bytes: &[u8], path: &Path) -> String {
    let digest = Sha256::digest(bytes);
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("{hex}-{}", sanitize_stem(&file_stem(path)))
}

fn is_sentence_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '…')
}

/// Char offsets just past sentence-ending punctuation that is followed by
/// whitespace or an uppercase letter.
fn sentence_boundaries(chars: &[char]) -> Vec<usize> {
    chars
        .windows(2)
        .enumerate()
        .filter(|(_, w)| is_sentence_terminal(w[0]) && (w[1].is_whitespace() || w[1].is_uppercase()))
        .map(|(i, _)| i + 1)
        .collect()
}

/// Splits a document into overlapping chunks.
///
/// Every chunk after the first starts exactly `overlap_chars` before the end
/// of its predecessor. In sentence mode the end of a chunk retreats to the
/// last sentence boundary that still leaves the chunk longer than the
/// overlap; without one the hard cut is used.
pub fn chunk_document(doc: &SourceDocument, cfg: &ChunkingConfig) -> Result<Vec<Chunk>> {
    cfg.validate()?;
    let chars: Vec<char> = doc.text.chars().collect();
    let len = chars.len();
    if len == 0 {
        return Ok(Vec::new());
    }
    let boundaries = match cfg.boundary_mode {
        BoundaryMode::Hard => Vec::new(),
        BoundaryMode::Sentence => sentence_boundaries(&chars),
    };

    let mut spans = Vec::new();
    let mut start = 0usize;
    loop {
        let hard_end = (start + cfg.max_chars).min(len);
        let end = if hard_end == len || cfg.boundary_mode == BoundaryMode::Hard {
            hard_end
        } else {
            let min_end = start + cfg.overlap_chars + 1;
            let upper = boundaries.partition_point(|&b| b <= hard_end);
            match boundaries[..upper].last() {
                Some(&b) if b >= min_end => b,
                _ => hard_end,
            }
        };
        spans.push((start, end));
        if end == len {
            break;
        }
        start = end - cfg.overlap_chars;
    }

    let chunks = spans
        .into_iter()
        .enumerate()
        .map(|(ordinal, (s, e))| Chunk {
            chunk_id: Chunk::make_id(&doc.doc_id, ordinal),
            doc_id: doc.doc_id.clone(),
            ordinal,
            text: chars[s..e].iter().collect(),
            span: (s, e),
            metadata: BTreeMap::new(),
        })
        .collect();
    Ok(chunks)
}

/// Copies document identity onto a chunk. Idempotent.
pub fn tag_metadata(mut chunk: Chunk, doc: &SourceDocument) -> Result<Chunk> {
    if chunk.doc_id != doc.doc_id {
        return Err(IngestError::Consistency {
            chunk_id: chunk.chunk_id,
            doc_id: doc.doc_id.clone(),
        });
    }
    chunk.metadata.insert("title".into(), doc.title.clone());
    chunk
        .metadata
        .insert("source_path".into(), doc.source_path.clone());
    chunk
        .metadata
        .insert("language".into(), doc.language.as_str().to_owned());
    Ok(chunk)
}

/// One entry of a corpus manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub language: Option<Language>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let raw = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut entries: Vec<ManifestEntry> =
        serde_json::from_str(&raw).map_err(|e| IngestError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for e in &mut entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(entries)
}

/// Lists `.txt` / `.md` files of a corpus directory (recursively) in sorted
/// order, or any file when an external extractor is configured.
pub fn scan_corpus_dir(dir: &Path, include_other: bool) -> Result<Vec<ManifestEntry>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files).map_err(|source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    files.sort();
    Ok(files
        .into_iter()
        .filter(|p| include_other || TextFormat::from_path(p).is_some())
        .map(|path| ManifestEntry {
            path,
            title: None,
            language: None,
        })
        .collect())
}

/// Summary of a corpus ingestion run.
#[derive(Debug, Default)]
pub struct IngestOutcome {
    pub documents: Vec<SourceDocument>,
    pub chunks: Vec<Chunk>,
    /// Documents that were skipped, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    pub replaced_sequences: usize,
}

/// Extracts, chunks and tags every manifest entry. Empty documents are
/// skipped and reported; IO failures abort.
pub fn ingest_corpus(
    entries: &[ManifestEntry],
    cfg: &ChunkingConfig,
    extractor: Option<&CommandExtractor>,
) -> Result<IngestOutcome> {
    cfg.validate()?;
    let mut outcome = IngestOutcome::default();
    for entry in entries {
        let extracted = match (TextFormat::from_path(&entry.path), extractor) {
            (Some(fmt), _) => extract_text(&entry.path, fmt),
            (None, Some(ext)) => ext.extract(&entry.path),
            (None, None) => Err(IngestError::UnsupportedFormat(
                entry.path.display().to_string(),
            )),
        };
        let mut extracted = match extracted {
            Ok(x) => x,
            Err(IngestError::EmptyDocument(p)) => {
                outcome.skipped.push((p, "empty after normalization".into()));
                continue;
            }
            Err(e) => return Err(e),
        };
        if let Some(title) = &entry.title {
            extracted.document.title = title.clone();
        }
        if let Some(lang) = entry.language {
            extracted.document.language = lang;
        }
        outcome.replaced_sequences += extracted.replaced_sequences;
        let doc = extracted.document;
        for chunk in chunk_document(&doc, cfg)? {
            outcome.chunks.push(tag_metadata(chunk, &doc)?);
        }
        outcome.documents.push(doc);
    }
    Ok(outcome)
}

/// Writes chunks as JSON Lines, one chunk per line.
pub fn write_chunks_jsonl<W: std::io::Write>(mut out: W, chunks: &[Chunk]) -> std::io::Result<()> {
    for c in chunks {
        serde_json::to_writer(&mut out, c)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads a JSON Lines chunks file. Blank lines are ignored; any malformed
/// line fails the whole read with its 1-based line number.
pub fn read_chunks_jsonl(path: &Path) -> Result<Vec<Chunk>> {
    let raw = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut chunks = Vec::new();
    for (n, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let chunk: Chunk = serde_json::from_str(line).map_err(|e| IngestError::Manifest {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        chunks.push(chunk);
    }
    Ok(chunks)
}
