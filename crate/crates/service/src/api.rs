//! HTTP routes.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::channel::mpsc;
use futures::{stream, Stream, StreamExt};
use ragline_core::generation::GenerationFailure;
use ragline_core::pipeline::{prepare_query, PrepareError};
use ragline_core::retrieval::RetrievalParams;
use ragline_core::{generate, ExportFormat, Language};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::events::{DoneData, ErrorData, QueryEvent, SourceRef};
use crate::state::{AppState, ReindexError};

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/query", post(query))
        .route("/api/feedback", post(feedback))
        .route("/api/history/{session_id}", get(history))
        .route("/api/export/{session_id}", get(export))
        .route("/api/models", get(models))
        .route("/api/healthz", get(healthz))
        .route("/api/admin/reindex", post(reindex))
        .layer(middleware::from_fn(access_log))
        .with_state(state)
}

async fn access_log(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_owned();
    let started = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        target: "ragline::access",
        method = %method,
        path = %path,
        status = resp.status().as_u16(),
        latency_ms = started.elapsed().as_millis() as u64,
        "request"
    );
    resp
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> T + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

#[derive(Debug, Deserialize)]
pub struct QueryRequest {
    pub session_id: String,
    pub question: String,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub language: Option<String>,
}

enum Msg {
    Token(String),
    Done(DoneData),
    Failed(GenerationFailure),
    Error(ErrorData),
}

fn sse_event(ev: &QueryEvent) -> Result<Event, Infallible> {
    Ok(Event::default().event(ev.name()).data(ev.data_json()))
}

async fn query(
    State(state): State<Arc<AppState>>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let Json(req) = body?;
    if req.question.trim().is_empty() {
        return Err(ApiError::bad_request("question is blank"));
    }
    if req.session_id.trim().is_empty() {
        return Err(ApiError::bad_request("session_id is blank"));
    }
    let cfg = state.config();
    let model_id = req.model_id.clone().unwrap_or_else(|| cfg.default_model.clone());
    let profile = cfg
        .model(&model_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown model {model_id:?}")))?;
    let language = match req.language.as_deref() {
        None => cfg.default_language(),
        Some(tag) => {
            let lang: Language = tag.parse().map_err(|_| ApiError::bad_request(format!("unknown language {tag:?}")))?;
            if !cfg.ui_languages.contains(&lang) {
                return Err(ApiError::bad_request(format!("language {tag:?} is not enabled")));
            }
            lang
        }
    };
    let backend = match state.backend(&model_id) {
        Some(Ok(b)) => Arc::clone(b),
        Some(Err(e)) => return Err(ApiError::from_generation(&e.clone().into())),
        None => return Err(ApiError::not_found(format!("unknown model {model_id:?}"))),
    };
    let guard = state
        .begin_session(&req.session_id)
        .ok_or_else(|| ApiError::conflict("a generation is already running for this session"))?;

    let kb = state.knowledge_base();
    let provider = state.provider();
    let params: RetrievalParams = cfg.retrieval;
    let question = req.question.clone();
    let prepared = blocking(move || prepare_query(&kb, provider.as_ref(), &question, language, &params))
        .await?
        .map_err(|e| match e {
            PrepareError::Retrieval(e) => {
                tracing::error!(error = %e, "retrieval failed");
                ApiError::new(StatusCode::BAD_GATEWAY, "retrieval", "retrieval failed")
            }
            PrepareError::Template(e) => ApiError::bad_request(e.to_string()),
        })?;
    let sources: Vec<SourceRef> = prepared
        .bundle
        .hits
        .iter()
        .map(|h| SourceRef {
            chunk_id: h.chunk_id.clone(),
            title: h.title().to_owned(),
            source_path: h.source_path().to_owned(),
            score: h.score,
        })
        .collect();

    let (tx, mut rx) = mpsc::unbounded::<Msg>();
    let store = state.store();
    let session_id = req.session_id.clone();
    tokio::spawn(async move {
        let _guard = guard;
        let token_tx = tx.clone();
        let outcome = generate(backend.as_ref(), &prepared.prompt, &profile, |t| {
            match token_tx.unbounded_send(Msg::Token(t.to_owned())) {
                Ok(()) => ControlFlow::Continue(()),
                Err(_) => ControlFlow::Break(()),
            }
        })
        .await;
        let msg = match outcome {
            Ok(result) => {
                let record = prepared.interaction_record(&session_id, &result);
                let stored = tokio::task::spawn_blocking(move || store.record_interaction(&record)).await;
                match stored {
                    Ok(Ok(interaction_id)) => Msg::Done(DoneData {
                        interaction_id,
                        latency_ms: result.latency_ms,
                        truncated: result.truncated,
                    }),
                    Ok(Err(e)) => {
                        tracing::error!(error = %e, "cannot persist interaction");
                        Msg::Error(ErrorData {
                            code: "storage".into(),
                            message: "the answer could not be saved".into(),
                        })
                    }
                    Err(e) => Msg::Error(ErrorData {
                        code: "internal".into(),
                        message: format!("worker failed: {e}"),
                    }),
                }
            }
            Err(failure) => Msg::Failed(failure),
        };
        let _ = tx.unbounded_send(msg);
    });

    // Wait for the first message so failures before any text keep their
    // HTTP status instead of becoming an in-stream error.
    let first = match rx.next().await {
        Some(Msg::Failed(f)) => return Err(ApiError::from_generation(&f.error)),
        Some(m) => m,
        None => return Err(ApiError::internal("generation task ended unexpectedly")),
    };
    let to_event = |m: Msg| match m {
        Msg::Token(t) => QueryEvent::Token(t),
        Msg::Done(d) => QueryEvent::Done(d),
        Msg::Error(e) => QueryEvent::Error(e),
        Msg::Failed(f) => {
            let e = ApiError::from_generation(&f.error);
            QueryEvent::Error(ErrorData {
                code: e.code.into(),
                message: e.message,
            })
        }
    };
    let head = stream::iter([QueryEvent::Sources(sources), to_event(first)]);
    let events = head.chain(rx.map(to_event)).map(|ev| sse_event(&ev));
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
pub struct FeedbackRequest {
    pub interaction_id: String,
    pub rating: i64,
    #[serde(default)]
    pub comment: Option<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

async fn feedback(
    State(state): State<Arc<AppState>>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<StatusCode, ApiError> {
    let Json(req) = body?;
    let store = state.store();
    blocking(move || store.record_feedback(&req.interaction_id, req.rating, req.comment.as_deref(), &req.labels))
        .await??;
    Ok(StatusCode::NO_CONTENT)
}

async fn history(State(state): State<Arc<AppState>>, Path(session_id): Path<String>) -> Result<Response, ApiError> {
    let store = state.store();
    let sid = session_id.clone();
    let items = blocking(move || store.session_history(&sid)).await??;
    if items.is_empty() {
        return Err(ApiError::not_found(format!("no interactions for session {session_id:?}")));
    }
    Ok(Json(serde_json::json!({ "session_id": session_id, "items": items })).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ExportParams {
    #[serde(default)]
    pub format: Option<String>,
}

async fn export(
    State(state): State<Arc<AppState>>,
    Path(session_id): Path<String>,
    params: Result<Query<ExportParams>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(params) = params?;
    let format = match params.format.as_deref() {
        None => ExportFormat::Html,
        Some(f) => f.parse::<ExportFormat>().map_err(ApiError::bad_request)?,
    };
    let store = state.store();
    let sid = session_id.clone();
    let doc = blocking(move || store.export_history(&sid, format)).await??;
    let file_stem: String = session_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let disposition = format!("inline; filename=\"session-{file_stem}.{}\"", format.extension());
    Ok((
        [
            (header::CONTENT_TYPE, format.content_type().to_owned()),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        doc,
    )
        .into_response())
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelInfo {
    pub model_id: String,
    pub max_answer_tokens: u32,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelsResponse {
    pub default_model: String,
    pub models: Vec<ModelInfo>,
}

async fn models(State(state): State<Arc<AppState>>) -> Json<ModelsResponse> {
    let cfg = state.config();
    Json(ModelsResponse {
        default_model: cfg.default_model.clone(),
        models: cfg
            .models
            .iter()
            .map(|m| ModelInfo {
                model_id: m.model_id.clone(),
                max_answer_tokens: m.max_answer_tokens,
            })
            .collect(),
    })
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Health {
    pub status: String,
    pub index_entries: usize,
    pub store_ok: bool,
}

async fn healthz(State(state): State<Arc<AppState>>) -> Result<Json<Health>, ApiError> {
    let store = state.store();
    let store_ok = blocking(move || store.ping()).await?;
    let index_present = state.config().index_path.exists();
    Ok(Json(Health {
        status: if store_ok && index_present { "ok" } else { "degraded" }.to_owned(),
        index_entries: state.knowledge_base().index().len(),
        store_ok,
    }))
}

#[derive(Debug, Deserialize)]
pub struct ReindexRequest {
    pub chunks_path: PathBuf,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ReindexResponse {
    pub entries: usize,
    pub built_at: chrono::DateTime<chrono::Utc>,
}

async fn reindex(
    State(state): State<Arc<AppState>>,
    body: Result<Json<ReindexRequest>, JsonRejection>,
) -> Result<Json<ReindexResponse>, ApiError> {
    let Json(req) = body?;
    let lock = state.reindex_lock();
    let running = lock
        .try_lock_owned()
        .map_err(|_| ApiError::conflict("a rebuild is already running"))?;
    let worker = Arc::clone(&state);
    let report = blocking(move || {
        let _running = running;
        worker.rebuild(&req.chunks_path)
    })
    .await?
    .map_err(|e| match e {
        ReindexError::Input(_) | ReindexError::Empty => {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_chunks", e.to_string())
        }
        ReindexError::Embedding(_) => ApiError::new(StatusCode::BAD_GATEWAY, "embedding", e.to_string()),
        ReindexError::Build(_) | ReindexError::Write { .. } => ApiError::internal(e.to_string()),
    })?;
    Ok(Json(ReindexResponse {
        entries: report.entries,
        built_at: report.built_at,
    }))
}
