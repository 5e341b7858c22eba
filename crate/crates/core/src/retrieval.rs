//! Query-time retrieval and context assembly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{embed_query, EmbeddingProvider, QueryEmbedError};
use crate::index::{IndexError, VectorIndex};
use crate::ingest::Chunk;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_THRESHOLD: f32 = 0.0;
pub const DEFAULT_CHAR_BUDGET: usize = 6000;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query is blank")]
    EmptyQuery,
    #[error("retrieval failed: {0}")]
    Failed(String),
    #[error("index entry {0} has no chunk text")]
    MissingChunk(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}

impl From<QueryEmbedError> for RetrievalError {
    fn from(e: QueryEmbedError) -> Self {
        RetrievalError::Failed(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Rank individual chunks.
    #[default]
    FullChunk,
    /// Legacy: keep only each source document's best chunk.
    FilenameGrouped,
}

impl RetrievalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::FullChunk => "full_chunk",
            RetrievalMode::FilenameGrouped => "filename_grouped",
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full_chunk" => Ok(RetrievalMode::FullChunk),
            "filename_grouped" => Ok(RetrievalMode::FilenameGrouped),
            other => Err(format!("unknown retrieval mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    pub k: usize,
    pub threshold: f32,
    pub mode: RetrievalMode,
    pub char_budget: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            threshold: DEFAULT_THRESHOLD,
            mode: RetrievalMode::FullChunk,
            char_budget: DEFAULT_CHAR_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: String,
    pub score: f32,
    pub chunk_text: String,
    pub metadata: BTreeMap<String, String>,
}

impl RetrievalHit {
    pub fn title(&self) -> &str {
        self.metadata.get("title").map(String::as_str).unwrap_or("")
    }

    pub fn source_path(&self) -> &str {
        self.metadata.get("source_path").map(String::as_str).unwrap_or("")
    }
}

/// An index together with the chunk texts its entries refer to.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    index: VectorIndex,
    chunks: HashMap<String, Chunk>,
}

impl KnowledgeBase {
    /// Fails if any index entry has no matching chunk.
    pub fn new(index: VectorIndex, chunks: Vec<Chunk>) -> Result<Self, RetrievalError> {
        let chunks: HashMap<String, Chunk> = chunks.into_iter().map(|c| (c.chunk_id.clone(), c)).collect();
        if let Some(missing) = index.entries().iter().find(|e| !chunks.contains_key(&e.chunk_id)) {
            return Err(RetrievalError::MissingChunk(missing.chunk_id.clone()));
        }
        Ok(Self { index, chunks })
    }

    pub fn empty(dim: usize, provider_id: &str) -> Self {
        Self {
            index: VectorIndex::empty(dim, provider_id),
            chunks: HashMap::new(),
        }
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&Chunk> {
        self.chunks.get(chunk_id)
    }

    fn hit(&self, chunk_id: String, score: f32) -> Result<RetrievalHit, RetrievalError> {
        let chunk = self
            .chunks
            .get(&chunk_id)
            .ok_or_else(|| RetrievalError::MissingChunk(chunk_id.clone()))?;
        Ok(RetrievalHit {
            chunk_id,
            score,
            chunk_text: chunk.text.clone(),
            metadata: chunk.metadata.clone(),
        })
    }
}

/// Embeds `query_text` with the same provider used for the corpus and
/// returns the ranked hits for the requested mode.
///
/// A query with no embeddable tokens yields no hits.
pub fn retrieve(
    query_text: &str,
    kb: &KnowledgeBase,
    provider: &dyn EmbeddingProvider,
    k: usize,
    threshold: f32,
    mode: RetrievalMode,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if query_text.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    if k == 0 {
        return Err(IndexError::InvalidK.into());
    }
    let query = match embed_query(provider, query_text) {
        Ok(q) => q,
        Err(QueryEmbedError::Index(IndexError::ZeroVector)) => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    if kb.index.is_empty() {
        return Ok(Vec::new());
    }
    match mode {
        RetrievalMode::FullChunk => kb
            .index
            .search(&query, k, threshold)?
            .into_iter()
            .map(|h| kb.hit(h.chunk_id, h.score))
            .collect(),
        RetrievalMode::FilenameGrouped => {
            let all = kb.index.search(&query, kb.index.len(), threshold)?;
            let mut seen_docs = HashSet::new();
            let mut hits = Vec::with_capacity(k);
            for h in all {
                let doc_id = kb
                    .chunk(&h.chunk_id)
                    .map(|c| c.doc_id.clone())
                    .ok_or_else(|| RetrievalError::MissingChunk(h.chunk_id.clone()))?;
                if seen_docs.insert(doc_id) {
                    hits.push(kb.hit(h.chunk_id, h.score)?);
                    if hits.len() == k {
                        break;
                    }
                }
            }
            Ok(hits)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    /// Hits that made it into the context, in rank order; hit `i` is cited as `[S{i+1}]`.
    pub hits: Vec<RetrievalHit>,
    pub context_text: String,
    pub char_budget: usize,
    pub used_chars: usize,
    /// Chunk ids skipped because they did not fit.
    pub skipped: Vec<String>,
    pub no_context: bool,
}

impl ContextBundle {
    pub fn empty(char_budget: usize) -> Self {
        Self {
            hits: Vec::new(),
            context_text: String::new(),
            char_budget,
            used_chars: 0,
            skipped: Vec::new(),
            no_context: true,
        }
    }
}

/// Renders one cited source block.
pub fn render_source(citation: usize, hit: &RetrievalHit) -> String {
    format!(
        "[S{citation}] ({} — {})\n{}\n\n",
        hit.title(),
        hit.source_path(),
        hit.chunk_text
    )
}

/// Greedily packs hits in rank order into a character budget. A hit that does
/// not fit is skipped whole and later, smaller hits may still be included.
pub fn assemble_context(hits: &[RetrievalHit], char_budget: usize) -> ContextBundle {
    let mut bundle = ContextBundle::empty(char_budget);
    for hit in hits {
        let block = render_source(bundle.hits.len() + 1, hit);
        let size = block.chars().count();
        if bundle.used_chars + size > char_budget {
            bundle.skipped.push(hit.chunk_id.clone());
            continue;
        }
        bundle.used_chars += size;
        bundle.context_text.push_str(&block);
        bundle.hits.push(hit.clone());
    }
    bundle.no_context = bundle.hits.is_empty();
    bundle
}
