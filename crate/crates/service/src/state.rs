//! Shared service state: the swappable knowledge base, the feedback store
//! and one chat backend per registered model.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use ragline_core::embed::{BuildError, EmbedError};
use ragline_core::feedback::StoreError;
use ragline_core::generation::{ChatBackend, ProfileError};
use ragline_core::index::IndexError;
use ragline_core::ingest::{read_chunks_jsonl, write_chunks_jsonl, IngestError};
use ragline_core::retrieval::RetrievalError;
use ragline_core::{build_index, load_index, save_index, Chunk, EmbeddingProvider, FeedbackStore, KnowledgeBase};
use thiserror::Error;

use crate::config::ServiceConfig;

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("embedding provider: {0}")]
    Provider(#[from] EmbedError),
    #[error("index {path}: {source}")]
    Index {
        path: PathBuf,
        #[source]
        source: IndexError,
    },
    #[error("chunks: {0}")]
    Chunks(#[from] IngestError),
    #[error("index was built with provider {index}, config selects {configured}")]
    ProviderMismatch { index: String, configured: String },
    #[error("knowledge base: {0}")]
    KnowledgeBase(#[from] RetrievalError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
}

#[derive(Debug, Error)]
pub enum ReindexError {
    #[error("cannot read chunks: {0}")]
    Input(#[from] IngestError),
    #[error("chunks file contains no chunks")]
    Empty,
    #[error("embedding failed: {0}")]
    Embedding(String),
    #[error("index build failed: {0}")]
    Build(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReindexReport {
    pub entries: usize,
    pub built_at: DateTime<Utc>,
}

pub struct AppState {
    config: ServiceConfig,
    provider: Arc<dyn EmbeddingProvider>,
    kb: RwLock<Arc<KnowledgeBase>>,
    store: Arc<FeedbackStore>,
    backends: HashMap<String, Result<Arc<dyn ChatBackend>, ProfileError>>,
    active_sessions: Mutex<HashSet<String>>,
    reindexing: Arc<tokio::sync::Mutex<()>>,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState")
            .field("bind", &self.config.bind)
            .field("provider", &self.provider.provider_id())
            .field("index_entries", &self.knowledge_base().index().len())
            .finish_non_exhaustive()
    }
}

/// Loads the index and its chunks. A missing index file is not an error:
/// the service starts empty and reports itself degraded.
pub fn load_knowledge_base(
    index_path: &Path,
    chunks_path: &Path,
    provider: &dyn EmbeddingProvider,
) -> Result<Option<KnowledgeBase>, StartupError> {
    if !index_path.exists() {
        return Ok(None);
    }
    let index = load_index(index_path).map_err(|source| StartupError::Index {
        path: index_path.to_owned(),
        source,
    })?;
    if index.provider_id() != provider.provider_id() {
        return Err(StartupError::ProviderMismatch {
            index: index.provider_id().to_owned(),
            configured: provider.provider_id().to_owned(),
        });
    }
    let chunks = read_chunks_jsonl(chunks_path)?;
    Ok(Some(KnowledgeBase::new(index, chunks)?))
}

impl AppState {
    pub fn from_config(config: ServiceConfig) -> Result<Self, StartupError> {
        let provider = config.embedding.build()?;
        let store = FeedbackStore::open(&config.store_path)?;
        Self::with_parts(config, provider, store)
    }

    pub fn with_parts(
        config: ServiceConfig,
        provider: Arc<dyn EmbeddingProvider>,
        store: FeedbackStore,
    ) -> Result<Self, StartupError> {
        let kb = match load_knowledge_base(&config.index_path, &config.chunks_path, provider.as_ref())? {
            Some(kb) => kb,
            None => {
                tracing::warn!(path = %config.index_path.display(), "index file missing; serving without documents");
                KnowledgeBase::empty(provider.dim().unwrap_or(0), provider.provider_id())
            }
        };
        let backends = config
            .models
            .iter()
            .map(|m| (m.model_id.clone(), m.connect()))
            .collect();
        Ok(Self {
            config,
            provider,
            kb: RwLock::new(Arc::new(kb)),
            store: Arc::new(store),
            backends,
            active_sessions: Mutex::new(HashSet::new()),
            reindexing: Arc::new(tokio::sync::Mutex::new(())),
        })
    }

    /// Replaces the backend of a registered model.
    pub fn set_backend(&mut self, model_id: &str, backend: Arc<dyn ChatBackend>) -> bool {
        match self.backends.get_mut(model_id) {
            Some(slot) => {
                *slot = Ok(backend);
                true
            }
            None => false,
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn provider(&self) -> Arc<dyn EmbeddingProvider> {
        Arc::clone(&self.provider)
    }

    pub fn store(&self) -> Arc<FeedbackStore> {
        Arc::clone(&self.store)
    }

    pub fn backend(&self, model_id: &str) -> Option<&Result<Arc<dyn ChatBackend>, ProfileError>> {
        self.backends.get(model_id)
    }

    /// Snapshot of the current knowledge base; it stays valid after a swap.
    pub fn knowledge_base(&self) -> Arc<KnowledgeBase> {
        Arc::clone(&self.kb.read().unwrap_or_else(|p| p.into_inner()))
    }

    pub fn swap_knowledge_base(&self, kb: KnowledgeBase) {
        *self.kb.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(kb);
    }

    pub(crate) fn reindex_lock(&self) -> Arc<tokio::sync::Mutex<()>> {
        Arc::clone(&self.reindexing)
    }

    /// Marks a session as generating; `None` if it already is.
    pub(crate) fn begin_session(self: &Arc<Self>, session_id: &str) -> Option<SessionGuard> {
        let mut active = self.active_sessions.lock().unwrap_or_else(|p| p.into_inner());
        active.insert(session_id.to_owned()).then(|| SessionGuard {
            state: Arc::clone(self),
            session_id: session_id.to_owned(),
        })
    }

    /// Builds an index from a chunks file, persists index and chunks next to
    /// the configured paths, then swaps it in. Blocking.
    pub fn rebuild(&self, chunks_path: &Path) -> Result<ReindexReport, ReindexError> {
        let chunks = read_chunks_jsonl(chunks_path)?;
        let report = build_index(&chunks, self.provider.as_ref(), self.config.embed_batch_size).map_err(|e| match e {
            BuildError::NoChunks => ReindexError::Empty,
            BuildError::BuildFailed { .. } => ReindexError::Embedding(e.to_string()),
            other => ReindexError::Build(other.to_string()),
        })?;
        let kb = KnowledgeBase::new(report.index.clone(), chunks.clone()).map_err(|e| ReindexError::Build(e.to_string()))?;

        if !same_file(chunks_path, &self.config.chunks_path) {
            write_chunks_atomically(&self.config.chunks_path, &chunks)?;
        }
        save_index(&report.index, &self.config.index_path).map_err(|e| ReindexError::Write {
            path: self.config.index_path.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;

        let out = ReindexReport {
            entries: kb.index().len(),
            built_at: kb.index().built_at(),
        };
        self.swap_knowledge_base(kb);
        tracing::info!(entries = out.entries, dropped = report.dropped.len(), "index swapped");
        Ok(out)
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn write_chunks_atomically(path: &Path, chunks: &[Chunk]) -> Result<(), ReindexError> {
    let err = |source| ReindexError::Write {
        path: path.to_owned(),
        source,
    };
    let tmp = path.with_extension("jsonl.tmp");
    let file = std::fs::File::create(&tmp).map_err(err)?;
    let mut w = std::io::BufWriter::new(file);
    write_chunks_jsonl(&mut w, chunks).map_err(err)?;
    let file = w.into_inner().map_err(|e| err(e.into_error()))?;
    file.sync_all().map_err(err)?;
    std::fs::rename(&tmp, path).map_err(err)
}

/// Releases the session's generation slot when dropped.
pub(crate) struct SessionGuard {
    state: Arc<AppState>,
    session_id: String,
}

impl Drop for SessionGuard {
    fn drop(&mut self) {
        self.state
            .active_sessions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(&self.session_id);
    }
}
