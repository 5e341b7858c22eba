//! Grounded answer generation against a streaming chat backend.

pub mod backend;
pub mod mock;
pub mod prompt;

use std::ops::ControlFlow;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use backend::{BackendError, ChatBackend, ChatMessage, ChatRequest, HttpChatBackend, StreamEvent};
pub use mock::{MockBackend, MockScript, MOCK_SCHEME};
pub use prompt::{render_prompt, PromptTemplate, RenderedPrompt, TemplateError};

/// Answer cap used since full-chunk retrieval was introduced.
pub const DEFAULT_MAX_ANSWER_TOKENS: u32 = 2000;
/// Answer cap of the earlier deployment, kept as a preset.
pub const LEGACY_MAX_ANSWER_TOKENS: u32 = 700;
pub const DEFAULT_TIMEOUT_SECS: f64 = 120.0;
pub const DEFAULT_RETRIES: u32 = 2;
pub const DEFAULT_API_KEY_ENV: &str = "RAGLINE_CHAT_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerLengthPreset {
    Legacy,
    Extended,
}

impl AnswerLengthPreset {
    pub fn max_answer_tokens(self) -> u32 {
        match self {
            AnswerLengthPreset::Legacy => LEGACY_MAX_ANSWER_TOKENS,
            AnswerLengthPreset::Extended => DEFAULT_MAX_ANSWER_TOKENS,
        }
    }
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_ANSWER_TOKENS
}
fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}
fn default_true() -> bool {
    true
}
fn default_retries() -> u32 {
    DEFAULT_RETRIES
}
fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    /// `http(s)://...`, `mock://...`, or `env:VAR` to read the URL from the environment.
    pub endpoint_url: String,
    #[serde(default = "default_max_tokens")]
    pub max_answer_tokens: u32,
    #[serde(default = "default_timeout", rename = "request_timeout_secs")]
    pub request_timeout: f64,
    #[serde(default = "default_true")]
    pub stream: bool,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Environment variable holding the bearer token, if any.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    /// Extra request fields (temperature, top_p, ...) passed through verbatim.
    #[serde(default)]
    pub params: Map<String, Value>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProfileError {
    #[error("model {0}: max_answer_tokens must be at least 1")]
    MaxTokens(String),
    #[error("model {0}: request timeout must be positive")]
    Timeout(String),
    #[error("model {model}: {message}")]
    Endpoint { model: String, message: String },
}

impl ModelProfile {
    pub fn new(model_id: impl Into<String>, endpoint_url: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            endpoint_url: endpoint_url.into(),
            max_answer_tokens: DEFAULT_MAX_ANSWER_TOKENS,
            request_timeout: DEFAULT_TIMEOUT_SECS,
            stream: true,
            retries: DEFAULT_RETRIES,
            api_key_env: DEFAULT_API_KEY_ENV.to_owned(),
            params: Map::new(),
        }
    }

    pub fn with_preset(mut self, preset: AnswerLengthPreset) -> Self {
        self.max_answer_tokens = preset.max_answer_tokens();
        self
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.max_answer_tokens < 1 {
            return Err(ProfileError::MaxTokens(self.model_id.clone()));
        }
        if !(self.request_timeout.is_finite() && self.request_timeout > 0.0) {
            return Err(ProfileError::Timeout(self.model_id.clone()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout)
    }

    /// Resolves `env:VAR` endpoints.
    pub fn resolved_endpoint(&self) -> Result<String, ProfileError> {
        match self.endpoint_url.strip_prefix("env:") {
            Some(var) => std::env::var(var).map_err(|_| ProfileError::Endpoint {
                model: self.model_id.clone(),
                message: format!("environment variable {var} is not set"),
            }),
            None => Ok(self.endpoint_url.clone()),
        }
    }

    /// Creates the backend this profile points at.
    pub fn connect(&self) -> Result<Arc<dyn ChatBackend>, ProfileError> {
        self.validate()?;
        let url = self.resolved_endpoint()?;
        let endpoint_err = |message: String| ProfileError::Endpoint {
            model: self.model_id.clone(),
            message,
        };
        if url.starts_with(MOCK_SCHEME) {
            return Ok(Arc::new(MockBackend::from_url(&url).map_err(endpoint_err)?));
        }
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(endpoint_err(format!("unsupported endpoint {url:?}")));
        }
        let key = std::env::var(&self.api_key_env).ok();
        Ok(Arc::new(
            HttpChatBackend::new(url, key).map_err(|e| endpoint_err(e.to_string()))?,
        ))
    }

    pub fn request(&self, prompt: &RenderedPrompt) -> ChatRequest {
        ChatRequest {
            model: self.model_id.clone(),
            messages: vec![
                ChatMessage::system(prompt.system_text.clone()),
                ChatMessage::user(prompt.user_text.clone()),
            ],
            max_tokens: self.max_answer_tokens,
            stream: self.stream,
            params: self.params.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub answer_text: String,
    pub model_id: String,
    pub started_at: DateTime<Utc>,
    pub first_token_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub latency_ms: u64,
    pub token_events: u32,
    pub truncated: bool,
    /// Attempts made, including the successful one.
    pub attempts: u32,
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GenerationError {
    #[error("backend timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("backend error{}: {message}", status.map(|s| format!(" {s}")).unwrap_or_default())]
    Backend { status: Option<u16>, message: String },
    #[error("stream aborted: {reason}")]
    StreamAborted { reason: String },
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// A failed generation with whatever text had streamed before the failure.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("{error}")]
pub struct GenerationFailure {
    pub error: GenerationError,
    pub partial_text: String,
    pub token_events: u32,
    pub started_at: DateTime<Utc>,
    pub failed_at: DateTime<Utc>,
    pub attempts: u32,
}

fn elapsed_ms(from: DateTime<Utc>, to: DateTime<Utc>) -> u64 {
    (to - from).num_milliseconds().max(0) as u64
}

enum AttemptOutcome {
    Done { truncated: bool, finish_reason: Option<String> },
    TimedOutBeforeFirstToken,
}

/// Streams one answer, forwarding each increment to `on_token`.
///
/// Each attempt gets a fresh timer of `request_timeout` that covers opening
/// the stream and waiting for the first increment; only attempts that time
/// out before any text arrived are retried, so the callback never sees
/// duplicated text. Once streaming, a silence longer than the timeout aborts
/// the stream. At most `max_answer_tokens` increments are forwarded.
/// Returning `ControlFlow::Break` from the callback cancels the request.
pub async fn generate<F>(
    backend: &dyn ChatBackend,
    prompt: &RenderedPrompt,
    profile: &ModelProfile,
    mut on_token: F,
) -> Result<GenerationResult, GenerationFailure>
where
    F: FnMut(&str) -> ControlFlow<()> + Send,
{
    let started_at = Utc::now();
    let mut answer = String::new();
    let mut token_events = 0u32;
    let mut first_token_at: Option<DateTime<Utc>> = None;
    let mut attempts = 0u32;

    macro_rules! fail {
        ($err:expr) => {
            return Err(GenerationFailure {
                error: $err,
                partial_text: answer,
                token_events,
                started_at,
                failed_at: Utc::now(),
                attempts,
            })
        };
    }

    if let Err(e) = profile.validate() {
        fail!(e.into());
    }
    let request = profile.request(prompt);
    let timeout = profile.timeout();
    let cap = profile.max_answer_tokens;

    let outcome = loop {
        attempts += 1;
        let attempt = async {
            let mut stream = match tokio::time::timeout(timeout, backend.open_stream(&request)).await {
                Err(_) => return Ok(AttemptOutcome::TimedOutBeforeFirstToken),
                Ok(Err(e)) => return Err(map_backend_error(e)),
                Ok(Ok(s)) => s,
            };
            // The attempt timer spans open + first event.
            let deadline = tokio::time::Instant::now() + timeout;
            loop {
                let next = if token_events == 0 {
                    tokio::time::timeout_at(deadline, stream.next()).await
                } else {
                    tokio::time::timeout(timeout, stream.next()).await
                };
                let event = match next {
                    Err(_) if token_events == 0 => return Ok(AttemptOutcome::TimedOutBeforeFirstToken),
                    Err(_) => {
                        return Err(GenerationError::StreamAborted {
                            reason: format!("no data for {:.1}s", timeout.as_secs_f64()),
                        })
                    }
                    Ok(None) => {
                        return Err(GenerationError::StreamAborted {
                            reason: "stream ended without a finish event".into(),
                        })
                    }
                    Ok(Some(Err(e))) => return Err(map_backend_error(e)),
                    Ok(Some(Ok(ev))) => ev,
                };
                match event {
                    StreamEvent::Delta(text) => {
                        if token_events >= cap {
                            return Ok(AttemptOutcome::Done {
                                truncated: true,
                                finish_reason: Some("length".into()),
                            });
                        }
                        if first_token_at.is_none() {
                            first_token_at = Some(Utc::now());
                        }
                        token_events += 1;
                        answer.push_str(&text);
                        if on_token(&text).is_break() {
                            return Err(GenerationError::StreamAborted {
                                reason: "cancelled by client".into(),
                            });
                        }
                    }
                    StreamEvent::Finish(reason) => {
                        let truncated = reason.as_deref() == Some("length");
                        return Ok(AttemptOutcome::Done {
                            truncated,
                            finish_reason: reason,
                        });
                    }
                }
            }
        };
        match attempt.await {
            Ok(AttemptOutcome::Done { truncated, finish_reason }) => break (truncated, finish_reason),
            Ok(AttemptOutcome::TimedOutBeforeFirstToken) => {
                if attempts > profile.retries {
                    fail!(GenerationError::Timeout { attempts });
                }
                tracing::warn!(model = %profile.model_id, attempts, "generation timed out, retrying");
            }
            Err(e) => fail!(e),
        }
    };

    let finished_at = Utc::now();
    let (truncated, finish_reason) = outcome;
    Ok(GenerationResult {
        answer_text: answer,
        model_id: profile.model_id.clone(),
        started_at,
        first_token_at: first_token_at.unwrap_or(finished_at),
        finished_at,
        latency_ms: elapsed_ms(started_at, finished_at),
        token_events,
        truncated,
        attempts,
        finish_reason,
    })
}

fn map_backend_error(e: BackendError) -> GenerationError {
    match e {
        BackendError::Status { status, body } => GenerationError::Backend {
            status: Some(status),
            message: body,
        },
        BackendError::Transport(m) | BackendError::Protocol(m) => GenerationError::Backend {
            status: None,
            message: m,
        },
        BackendError::Dropped(reason) => GenerationError::StreamAborted { reason },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prompt() -> RenderedPrompt {
        RenderedPrompt {
            system_text: "s".into(),
            user_text: "[S1] context".into(),
        }
    }

    fn profile(timeout: f64) -> ModelProfile {
        let mut p = ModelProfile::new("mock-model", "mock://t");
        p.request_timeout = timeout;
        p
    }

    async fn run(backend: &MockBackend, profile: &ModelProfile) -> (Result<GenerationResult, GenerationFailure>, Vec<String>) {
        let mut seen = Vec::new();
        let r = generate(backend, &prompt(), profile, |t| {
            seen.push(t.to_owned());
            ControlFlow::Continue(())
        })
        .await;
        (r, seen)
    }

    #[tokio::test]
    async fn concatenates_increments() {
        let b = MockBackend::new(MockScript::reply("Hel lo"));
        let (r, seen) = run(&b, &profile(5.0)).await;
        let r = r.unwrap();
        assert_eq!(seen, ["Hel ", "lo"]);
        assert_eq!(r.answer_text, "Hel lo");
        assert_eq!(r.token_events, 2);
        assert!(!r.truncated);
        assert_eq!(r.attempts, 1);
        assert!(r.started_at <= r.first_token_at && r.first_token_at <= r.finished_at);
    }

    #[tokio::test]
    async fn retries_after_timeout_with_fresh_timer() {
        let b = MockBackend::new(MockScript {
            reply: Some("ok".into()),
            stall_attempts: 1,
            ..MockScript::default()
        });
        let (r, seen) = run(&b, &profile(0.05)).await;
        let r = r.unwrap();
        assert_eq!(r.attempts, 2);
        assert_eq!(b.calls(), 2);
        assert_eq!(seen, ["ok"]);
    }

    #[tokio::test]
    async fn times_out_after_all_retries() {
        let b = MockBackend::new(MockScript {
            stall_attempts: 10,
            ..MockScript::default()
        });
        let mut p = profile(0.02);
        p.retries = 2;
        let (r, _) = run(&b, &p).await;
        let f = r.unwrap_err();
        assert_eq!(f.error, GenerationError::Timeout { attempts: 3 });
        assert_eq!(b.calls(), 3);
        assert!(f.started_at <= f.failed_at);
    }

    #[tokio::test]
    async fn length_stop_sets_truncated() {
        let b = MockBackend::new(MockScript {
            tokens: Some(50),
            ..MockScript::default()
        });
        let mut p = profile(5.0);
        p.max_answer_tokens = 7;
        let (r, seen) = run(&b, &p).await;
        let r = r.unwrap();
        assert!(r.truncated);
        assert_eq!(r.token_events, 7);
        assert_eq!(seen.len(), 7);
        assert_eq!(b.requests()[0].max_tokens, 7);
    }

    #[tokio::test]
    async fn client_side_cap_when_backend_ignores_max_tokens() {
        struct Chatty;
        #[async_trait::async_trait]
        impl ChatBackend for Chatty {
            async fn open_stream(&self, _: &ChatRequest) -> Result<backend::EventStream, BackendError> {
                let evs = (0..20).map(|i| Ok(StreamEvent::Delta(format!("{i} "))));
                Ok(futures::stream::iter(evs.chain([Ok(StreamEvent::Finish(Some("stop".into())))])).boxed())
            }
        }
        let mut p = profile(5.0);
        p.max_answer_tokens = 5;
        let r = generate(&Chatty, &prompt(), &p, |_| ControlFlow::Continue(())).await.unwrap();
        assert_eq!(r.token_events, 5);
        assert!(r.truncated);
        assert_eq!(r.answer_text, "0 1 2 3 4 ");
    }

    #[tokio::test]
    async fn backend_status_is_not_retried() {
        let b = MockBackend::new(MockScript {
            fail_status: Some(503),
            ..MockScript::default()
        });
        let (r, _) = run(&b, &profile(5.0)).await;
        assert!(matches!(
            r.unwrap_err().error,
            GenerationError::Backend { status: Some(503), .. }
        ));
        assert_eq!(b.calls(), 1);
    }

    #[tokio::test]
    async fn dropped_stream_keeps_partial_text() {
        let b = MockBackend::new(MockScript {
            reply: Some("one two three four".into()),
            drop_after: Some(2),
            ..MockScript::default()
        });
        let (r, _) = run(&b, &profile(5.0)).await;
        let f = r.unwrap_err();
        assert!(matches!(f.error, GenerationError::StreamAborted { .. }));
        assert_eq!(f.partial_text, "one two ");
        assert_eq!(f.token_events, 2);
    }

    #[tokio::test]
    async fn callback_break_cancels() {
        let b = MockBackend::new(MockScript::reply("a b c d e"));
        let mut n = 0;
        let r = generate(&b, &prompt(), &profile(5.0), |_| {
            n += 1;
            if n == 2 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .await;
        let f = r.unwrap_err();
        assert_eq!(f.partial_text, "a b ");
        assert!(matches!(f.error, GenerationError::StreamAborted { .. }));
    }

    #[tokio::test]
    async fn mid_stream_stall_aborts() {
        struct Staller;
        #[async_trait::async_trait]
        impl ChatBackend for Staller {
            async fn open_stream(&self, _: &ChatRequest) -> Result<backend::EventStream, BackendError> {
                Ok(futures::stream::iter([Ok(StreamEvent::Delta("x".into()))])
                    .chain(futures::stream::pending())
                    .boxed())
            }
        }
        let r = generate(&Staller, &prompt(), &profile(0.05), |_| ControlFlow::Continue(())).await;
        let f = r.unwrap_err();
        assert!(matches!(f.error, GenerationError::StreamAborted { .. }));
        assert_eq!(f.partial_text, "x");
        assert_eq!(f.attempts, 1);
    }

    #[test]
    fn profile_validation_and_presets() {
        let p = ModelProfile::new("m", "mock://x");
        assert_eq!(p.max_answer_tokens, 2000);
        assert_eq!(p.retries, 2);
        assert_eq!(p.request_timeout, 120.0);
        assert!(p.stream);
        assert_eq!(p.clone().with_preset(AnswerLengthPreset::Legacy).max_answer_tokens, 700);
        let mut bad = p.clone();
        bad.max_answer_tokens = 0;
        assert!(bad.validate().is_err());
        let mut bad = p;
        bad.request_timeout = 0.0;
        assert!(bad.validate().is_err());
        assert!(ModelProfile::new("m", "ftp://x").connect().is_err());
        assert!(ModelProfile::new("m", "env:RAGLINE_TEST_UNSET_VAR_XYZ").connect().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn increments_always_concatenate_to_answer(
            words in proptest::collection::vec("[a-zäö]{1,6}", 0..40),
            cap in 1u32..50,
        ) {
            let reply = words.join(" ");
            let rt = tokio::runtime::Builder::new_current_thread().enable_time().build().unwrap();
            let b = MockBackend::new(MockScript::reply(reply.clone()));
            let mut p = profile(5.0);
            p.max_answer_tokens = cap;
            let mut seen = String::new();
            let r = rt.block_on(generate(&b, &prompt(), &p, |t| {
                seen.push_str(t);
                ControlFlow::Continue(())
            })).unwrap();
            prop_assert_eq!(&r.answer_text, &seen);
            prop_assert!(r.token_events <= cap);
            prop_assert!(reply.starts_with(&r.answer_text));
            prop_assert_eq!(r.truncated, words.len() as u32 > cap);
            prop_assert!(r.started_at <= r.first_token_at && r.first_token_at <= r.finished_at);
        }
    }
}
