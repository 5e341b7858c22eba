//! Core of a document-grounded question answering system: corpus ingestion,
//! exact cosine retrieval over a flat index, streamed answer generation,
//! interaction/feedback storage and Likert evaluation reports.

pub mod embed;
pub mod eval;
pub mod feedback;
pub mod generation;
pub mod index;
pub mod ingest;
pub mod pipeline;
pub mod retrieval;

pub use embed::{build_index, EmbeddingProvider, ProviderSpec, HashedBagOfWords, RemoteEmbeddingProvider};
pub use eval::{compare_rounds, latency_stats, likert_report, LatencyStats, LikertReport, RoundComparison};
pub use feedback::{ExportFormat, FeedbackRecord, FeedbackStore, InteractionRecord, RetrievedChunk};
pub use generation::{generate, GenerationResult, ModelProfile, PromptTemplate};
pub use index::{load_index, normalize, save_index, EmbeddingVector, IndexEntry, SearchHit, VectorIndex};
pub use ingest::{chunk_document, extract_text, tag_metadata, Chunk, ChunkingConfig, Language, SourceDocument};
pub use retrieval::{assemble_context, retrieve, ContextBundle, KnowledgeBase, RetrievalHit, RetrievalMode};
