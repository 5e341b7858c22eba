//! Embedding providers and index construction.

use std::sync::OnceLock;
use std::time::Duration;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{normalize, EmbeddingVector, IndexEntry, IndexError, VectorIndex};
use crate::ingest::Chunk;

pub const DEFAULT_LOCAL_DIM: usize = 256;
pub const DEFAULT_REMOTE_MODEL: &str = "text-embedding-ada-002";
pub const EMBED_URL_ENV: &str = "RAGLINE_EMBED_URL";
pub const EMBED_MODEL_ENV: &str = "RAGLINE_EMBED_MODEL";
pub const EMBED_KEY_ENV: &str = "RAGLINE_EMBED_API_KEY";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding request failed: {0}")]
    Request(String),
    #[error("embedding backend returned {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("provider returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("provider dimension changed from {expected} to {actual}")]
    DimensionChanged { expected: usize, actual: usize },
    #[error("missing configuration: {0}")]
    Config(String),
}

/// Maps texts to raw (not yet normalized) embedding vectors.
///
/// Implementations must return exactly one vector per input, all with the
/// same dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;

    /// `None` until the provider has produced a vector, for remote models
    /// whose size is only known from their responses.
    fn dim(&self) -> Option<usize>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Embeds a single query and normalizes it.
pub fn embed_query(provider: &dyn EmbeddingProvider, text: &str) -> Result<EmbeddingVector, QueryEmbedError> {
    let mut out = provider.embed_batch(&[text.to_owned()])?;
    let raw = out.pop().ok_or(EmbedError::CountMismatch { expected: 1, got: 0 })?;
    Ok(normalize(&raw)?)
}

#[derive(Debug, Error)]
pub enum QueryEmbedError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Offline hashed bag-of-words embedder.
///
/// Tokens are maximal runs of alphanumeric characters, lowercased and hashed
/// with 64-bit FNV-1a into `dim` buckets. Texts without tokens embed to the
/// zero vector.
#[derive(Debug, Clone)]
pub struct HashedBagOfWords {
    dim: usize,
    id: String,
}

impl HashedBagOfWords {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            dim,
            id: format!("local-hashed-bow-{dim}"),
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for token in tokenize(text) {
            v[(fnv1a(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        v
    }
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self::new(DEFAULT_LOCAL_DIM)
    }
}

impl EmbeddingProvider for HashedBagOfWords {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

/// Client for the common `POST {"model", "input"}` embeddings endpoint.
///
/// Uses a blocking HTTP client; call it from a blocking context.
pub struct RemoteEmbeddingProvider {
    url: String,
    model: String,
    api_key: Option<String>,
    retries: u32,
    client: reqwest::blocking::Client,
    dim: OnceLock<usize>,
    id: String,
}

impl std::fmt::Debug for RemoteEmbeddingProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEmbeddingProvider")
            .field("url", &self.url)
            .field("model", &self.model)
            .field("dim", &self.dim.get())
            .finish_non_exhaustive()
    }
}

impl RemoteEmbeddingProvider {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Result<Self, EmbedError> {
        let model = model.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EmbedError::Request(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            id: format!("remote:{model}"),
            model,
            api_key,
            retries: 2,
            client,
            dim: OnceLock::new(),
        })
    }

    /// Reads endpoint, model and key from `RAGLINE_EMBED_URL`,
    /// `RAGLINE_EMBED_MODEL` and `RAGLINE_EMBED_API_KEY`.
    pub fn from_env() -> Result<Self, EmbedError> {
        let url = std::env::var(EMBED_URL_ENV)
            .map_err(|_| EmbedError::Config(format!("{EMBED_URL_ENV} is not set")))?;
        let model = std::env::var(EMBED_MODEL_ENV).unwrap_or_else(|_| DEFAULT_REMOTE_MODEL.to_owned());
        Self::new(url, model, std::env::var(EMBED_KEY_ENV).ok())
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    fn request_once(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut req = self.client.post(&self.url).json(&EmbeddingRequest {
            model: &self.model,
            input: texts,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbedError::Request(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body: String = resp.text().unwrap_or_default().chars().take(200).collect();
            return Err(EmbedError::Status {
                status: status.as_u16(),
                body,
            });
        }
        let mut parsed: EmbeddingResponse = resp.json().map_err(|e| EmbedError::Malformed(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                got: parsed.data.len(),
            });
        }
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        let vectors: Vec<Vec<f32>> = parsed.data.into_iter().map(|d| d.embedding).collect();
        for v in &vectors {
            let expected = *self.dim.get_or_init(|| v.len());
            if v.len() != expected {
                return Err(EmbedError::DimensionChanged {
                    expected,
                    actual: v.len(),
                });
            }
        }
        Ok(vectors)
    }
}

impl EmbeddingProvider for RemoteEmbeddingProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut attempt = 0;
        loop {
            match self.request_once(texts) {
                Ok(v) => return Ok(v),
                // client errors and shape errors will not improve on retry
                Err(e @ (EmbedError::Status { status: 400..=499, .. }
                | EmbedError::DimensionChanged { .. }
                | EmbedError::CountMismatch { .. })) => return Err(e),
                Err(e) if attempt >= self.retries => return Err(e),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "embedding request failed, retrying");
                    std::thread::sleep(Duration::from_millis(200 * 2u64.pow(attempt)));
                    attempt += 1;
                }
            }
        }
    }
}

/// Which embedder to use, as named in config files and CLI flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "lowercase")]
pub enum ProviderSpec {
    Local {
        #[serde(default = "default_local_dim")]
        dim: usize,
    },
    /// Endpoint, model and key come from the `RAGLINE_EMBED_*` variables.
    Remote,
}

fn default_local_dim() -> usize {
    DEFAULT_LOCAL_DIM
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec::Local { dim: DEFAULT_LOCAL_DIM }
    }
}

impl ProviderSpec {
    pub fn build(&self) -> Result<std::sync::Arc<dyn EmbeddingProvider>, EmbedError> {
        Ok(match self {
            ProviderSpec::Local { dim } => {
                if *dim == 0 {
                    return Err(EmbedError::Config("local provider dimension must be positive".into()));
                }
                std::sync::Arc::new(HashedBagOfWords::new(*dim))
            }
            ProviderSpec::Remote => std::sync::Arc::new(RemoteEmbeddingProvider::from_env()?),
        })
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("no chunks to index")]
    NoChunks,
    #[error("batch size must be positive")]
    InvalidBatchSize,
    #[error("index build failed after embedding {embedded} chunks: {source}")]
    BuildFailed {
        embedded: usize,
        #[source]
        source: EmbedError,
    },
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug)]
pub struct BuildReport {
    pub index: VectorIndex,
    /// Chunks whose embedding was a zero vector.
    pub dropped: Vec<String>,
}

/// Embeds every chunk in batches and assembles a normalized index.
///
/// Output does not depend on `batch_size`. Zero-vector embeddings are
/// dropped and reported.
pub fn build_index(
    chunks: &[Chunk],
    provider: &dyn EmbeddingProvider,
    batch_size: usize,
) -> Result<BuildReport, BuildError> {
    if chunks.is_empty() {
        return Err(BuildError::NoChunks);
    }
    if batch_size == 0 {
        return Err(BuildError::InvalidBatchSize);
    }
    let mut entries = Vec::with_capacity(chunks.len());
    let mut dropped = Vec::new();
    let mut embedded = 0;
    let mut dim = None;
    for batch in chunks.chunks(batch_size) {
        let texts: Vec<String> = batch.iter().map(|c| c.text.clone()).collect();
        let raw = provider
            .embed_batch(&texts)
            .map_err(|source| BuildError::BuildFailed { embedded, source })?;
        if raw.len() != batch.len() {
            return Err(BuildError::BuildFailed {
                embedded,
                source: EmbedError::CountMismatch {
                    expected: batch.len(),
                    got: raw.len(),
                },
            });
        }
        for (chunk, v) in batch.iter().zip(raw) {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(BuildError::BuildFailed {
                    embedded,
                    source: EmbedError::DimensionChanged {
                        expected: d,
                        actual: v.len(),
                    },
                });
            }
            match normalize(&v) {
                Ok(vector) => entries.push(IndexEntry {
                    chunk_id: chunk.chunk_id.clone(),
                    vector,
                }),
                Err(IndexError::ZeroVector) => {
                    tracing::warn!(chunk_id = %chunk.chunk_id, "dropping chunk with zero embedding");
                    dropped.push(chunk.chunk_id.clone());
                }
                Err(e) => return Err(e.into()),
            }
            embedded += 1;
        }
    }
    let dim = dim.or(provider.dim()).ok_or(BuildError::NoChunks)?;
    let index = VectorIndex::new(dim, provider.provider_id(), entries, Utc::now())?;
    Ok(BuildReport { index, dropped })
}
