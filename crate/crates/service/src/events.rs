//! Wire format of the `/api/query` event stream, with a decoder for clients.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub chunk_id: String,
    pub title: String,
    pub source_path: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenData {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoneData {
    pub interaction_id: String,
    pub latency_ms: u64,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorData {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryEvent {
    Sources(Vec<SourceRef>),
    Token(String),
    Done(DoneData),
    Error(ErrorData),
}

impl QueryEvent {
    pub fn name(&self) -> &'static str {
        match self {
            QueryEvent::Sources(_) => "sources",
            QueryEvent::Token(_) => "token",
            QueryEvent::Done(_) => "done",
            QueryEvent::Error(_) => "error",
        }
    }

    /// JSON payload carried in the event's `data` field.
    pub fn data_json(&self) -> String {
        let v = match self {
            QueryEvent::Sources(s) => serde_json::to_string(s),
            QueryEvent::Token(t) => serde_json::to_string(&TokenData { text: t.clone() }),
            QueryEvent::Done(d) => serde_json::to_string(d),
            QueryEvent::Error(e) => serde_json::to_string(e),
        };
        v.expect("event payloads always serialize")
    }

    pub fn parse(name: &str, data: &str) -> Result<Self, String> {
        let bad = |e: serde_json::Error| format!("bad {name} event: {e}");
        Ok(match name {
            "sources" => QueryEvent::Sources(serde_json::from_str(data).map_err(bad)?),
            "token" => QueryEvent::Token(serde_json::from_str::<TokenData>(data).map_err(bad)?.text),
            "done" => QueryEvent::Done(serde_json::from_str(data).map_err(bad)?),
            "error" => QueryEvent::Error(serde_json::from_str(data).map_err(bad)?),
            other => return Err(format!("unknown event {other:?}")),
        })
    }
}

/// Incremental decoder for named server-sent events.
#[derive(Debug, Default)]
pub struct EventStreamDecoder {
    buf: Vec<u8>,
    name: Option<String>,
    data: Vec<String>,
}

impl EventStreamDecoder {
    /// Feeds raw bytes and returns every event completed by them.
    pub fn push(&mut self, bytes: &[u8]) -> Vec<Result<QueryEvent, String>> {
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
                    let name = self.name.take().unwrap_or_else(|| "message".into());
                    out.push(QueryEvent::parse(&name, &self.data.join("\n")));
                }
                self.data.clear();
                self.name = None;
            } else if let Some(rest) = line.strip_prefix("data:") {
                self.data.push(rest.strip_prefix(' ').unwrap_or(rest).to_owned());
            } else if let Some(rest) = line.strip_prefix("event:") {
                self.name = Some(rest.trim().to_owned());
            }
        }
        out
    }
}

/// Decodes a complete event-stream body.
pub fn decode_all(body: &[u8]) -> Result<Vec<QueryEvent>, String> {
    let mut d = EventStreamDecoder::default();
    let mut events = d.push(body);
    events.extend(d.push(b"\n\n"));
    events.into_iter().collect()
}
