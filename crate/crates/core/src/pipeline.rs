//! Query answering steps shared by the HTTP service and the CLI.

use thiserror::Error;

use crate::embed::EmbeddingProvider;
use crate::feedback::{InteractionRecord, RetrievedChunk};
use crate::generation::{render_prompt, GenerationResult, PromptTemplate, RenderedPrompt, TemplateError};
use crate::ingest::Language;
use crate::retrieval::{assemble_context, retrieve, ContextBundle, KnowledgeBase, RetrievalError, RetrievalParams};

#[derive(Debug, Error)]
pub enum PrepareError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Everything needed to call the model, plus what to show and store.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub question: String,
    pub params: RetrievalParams,
    pub bundle: ContextBundle,
    pub prompt: RenderedPrompt,
}

impl PreparedQuery {
    /// Sources actually placed in the prompt, in citation order.
    pub fn sources(&self) -> Vec<RetrievedChunk> {
        self.bundle
            .hits
            .iter()
            .map(|h| RetrievedChunk {
                chunk_id: h.chunk_id.clone(),
                score: h.score,
                title: Some(h.title().to_owned()).filter(|t| !t.is_empty()),
                source_path: Some(h.source_path().to_owned()).filter(|p| !p.is_empty()),
            })
            .collect()
    }

    pub fn interaction_record(&self, session_id: &str, result: &GenerationResult) -> InteractionRecord {
        let mut rec = InteractionRecord::new(session_id, self.question.clone(), result.model_id.clone());
        rec.retrieved = self.sources();
        rec.answer_text = result.answer_text.clone();
        rec.retrieval_mode = self.params.mode;
        rec.created_at = result.started_at;
        rec.latency_ms = result.latency_ms;
        rec
    }
}

/// Retrieves, packs the context and renders the prompt for one question.
pub fn prepare_query(
    kb: &KnowledgeBase,
    provider: &dyn EmbeddingProvider,
    question: &str,
    language: Language,
    params: &RetrievalParams,
) -> Result<PreparedQuery, PrepareError> {
    let hits = retrieve(question, kb, provider, params.k, params.threshold, params.mode)?;
    let bundle = assemble_context(&hits, params.char_budget);
    let prompt = render_prompt(&bundle, question, &PromptTemplate::builtin(language))?;
    Ok(PreparedQuery {
        question: question.to_owned(),
        params: *params,
        bundle,
        prompt,
    })
}
