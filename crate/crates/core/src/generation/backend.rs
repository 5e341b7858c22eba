//! Chat-completions backend contract and its HTTP implementation.

use async_trait::async_trait;
use futures::stream::{self, BoxStream, StreamExt};
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// Request body for a chat-completions endpoint. `params` carries any extra
/// decoding fields from the model profile and is flattened into the body.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub stream: bool,
    #[serde(flatten)]
    pub params: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamEvent {
    /// An incremental piece of answer text.
    Delta(String),
    /// The backend finished; carries its stop reason (`"stop"`, `"length"`, ...).
    Finish(Option<String>),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend returned {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend unreachable: {0}")]
    Transport(String),
    #[error("malformed backend stream: {0}")]
    Protocol(String),
    #[error("backend connection dropped: {0}")]
    Dropped(String),
}

pub type EventStream = BoxStream<'static, Result<StreamEvent, BackendError>>;

/// A chat model backend producing a stream of answer increments.
#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn open_stream(&self, request: &ChatRequest) -> Result<EventStream, BackendError>;
}

/// Streams from an OpenAI-style `/chat/completions` endpoint over HTTP(S).
#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    url: String,
    api_key: Option<String>,
    client: reqwest::Client,
}

impl HttpChatBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            api_key,
            client,
        })
    }
}

const BODY_EXCERPT_CHARS: usize = 300;

#[async_trait]
impl ChatBackend for HttpChatBackend {
    async fn open_stream(&self, request: &ChatRequest) -> Result<EventStream, BackendError> {
        let mut req = self.client.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: body.chars().take(BODY_EXCERPT_CHARS).collect(),
            });
        }
        if !request.stream {
            let body: Value = resp
                .json()
                .await
                .map_err(|e| BackendError::Protocol(e.to_string()))?;
            let choice = &body["choices"][0];
            let text = choice["message"]["content"]
                .as_str()
                .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))?
                .to_owned();
            let reason = choice["finish_reason"].as_str().map(str::to_owned);
            return Ok(stream::iter([Ok(StreamEvent::Delta(text)), Ok(StreamEvent::Finish(reason))]).boxed());
        }

        struct State {
            body: BoxStream<'static, reqwest::Result<bytes::Bytes>>,
            decoder: SseDecoder,
            pending: std::collections::VecDeque<Result<StreamEvent, BackendError>>,
            finished: bool,
        }
        let state = State {
            body: resp.bytes_stream().boxed(),
            decoder: SseDecoder::default(),
            pending: Default::default(),
            finished: false,
        };
        let events = stream::unfold(state, |mut st| async move {
            loop {
                if let Some(ev) = st.pending.pop_front() {
                    if matches!(ev, Ok(StreamEvent::Finish(_)) | Err(_)) {
                        st.finished = true;
                        st.pending.clear();
                    }
                    return Some((ev, st));
                }
                if st.finished {
                    return None;
                }
                match st.body.next().await {
                    Some(Ok(bytes)) => {
                        for data in st.decoder.push(&bytes) {
                            st.pending.extend(parse_completion_event(&data));
                        }
                    }
                    Some(Err(e)) => {
                        st.pending.push_back(Err(BackendError::Dropped(e.to_string())));
                    }
                    None => {
                        st.pending.push_back(Err(BackendError::Dropped(
                            "stream ended without a finish event".into(),
                        )));
                    }
                }
            }
        });
        Ok(events.boxed())
    }
}

/// Parses one SSE `data:` payload of a chat-completions stream into zero,
/// one or two events (a final delta may share its event with the stop reason).
pub fn parse_completion_event(data: &str) -> Vec<Result<StreamEvent, BackendError>> {
    let data = data.trim();
    if data.is_empty() {
        return Vec::new();
    }
    if data == "[DONE]" {
        return vec![Ok(StreamEvent::Finish(None))];
    }
    let v: Value = match serde_json::from_str(data) {
        Ok(v) => v,
        Err(e) => return vec![Err(BackendError::Protocol(format!("{e}: {data}")))],
    };
    let choice = &v["choices"][0];
    let mut out = Vec::new();
    if let Some(text) = choice["delta"]["content"].as_str().filter(|s| !s.is_empty()) {
        out.push(Ok(StreamEvent::Delta(text.to_owned())));
    }
    if let Some(reason) = choice["finish_reason"].as_str() {
        out.push(Ok(StreamEvent::Finish(Some(reason.to_owned()))));
    }
    out
}

/// Incremental server-sent-events decoder yielding the `data` of each
/// complete event.
#[derive(Debug, Default)]
pub struct SseDecoder {
    buf: Vec<u8>,
    data: Vec<String>,
}

impl SseDecoder {
    pub fn push(&mut self, bytes: &[u8]) -> Vec<String> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        while let Some(nl) = self.buf.iter().position(|&b| b == b'\n') {
            let mut line: Vec<u8> = self.buf.drain(..=nl).collect();
            line.pop();
            if line.last() == Some(&b'\r') {
                line.pop();
            }
            let line = String::from_utf8_lossy(&line);
            if line.is_empty() {
                if !self.data.is_empty() {
                    out.push(self.data.join("\n"));
                    self.data.clear();
                }
            } else if let Some(rest) = line.strip_prefix("data:") {
                self.data.push(rest.strip_prefix(' ').unwrap_or(rest).to_owned());
            }
            // comments, event names and ids are irrelevant for completions
        }
        out
    }
}
