//! Scripted in-process chat backend used by tests, demos and `mock://`
//! model endpoints.
//!
//! `mock://<name>?key=value&...` keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `reply` | answer text, split into word increments |
//! | `tokens` | number of increments to produce (cycles through the reply words) |
//! | `delay_ms` | pause before every increment |
//! | `stall_attempts` | the first N calls never produce a first increment |
//! | `fail_status` | every call fails with this HTTP status |
//! | `drop_after` | connection drops after this many increments |
//!
//! Without `reply` the mock answers with a fixed sentence citing `[S1]` when
//! the prompt contains sources.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};

use super::backend::{BackendError, ChatBackend, ChatRequest, EventStream, StreamEvent};

pub const MOCK_SCHEME: &str = "mock://";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockScript {
    pub reply: Option<String>,
    pub tokens: Option<usize>,
    pub delay: Duration,
    pub stall_attempts: usize,
    pub fail_status: Option<u16>,
    pub drop_after: Option<usize>,
}

impl MockScript {
    pub fn reply(text: impl Into<String>) -> Self {
        Self {
            reply: Some(text.into()),
            ..Self::default()
        }
    }

    /// Parses a `mock://` endpoint URL.
    pub fn from_url(url: &str) -> Result<Self, String> {
        let rest = url
            .strip_prefix(MOCK_SCHEME)
            .ok_or_else(|| format!("not a mock endpoint: {url}"))?;
        let query = rest.split_once('?').map(|(_, q)| q).unwrap_or("");
        let mut script = MockScript::default();
        for pair in query.split('&').filter(|p| !p.is_empty()) {
            let (key, value) = pair.split_once('=').unwrap_or((pair, ""));
            let value = percent_decode(value);
            let num = || value.parse::<u64>().map_err(|_| format!("mock parameter {key} expects a number, got {value:?}"));
            match key {
                "reply" => script.reply = Some(value.clone()),
                "tokens" => script.tokens = Some(num()? as usize),
                "delay_ms" => script.delay = Duration::from_millis(num()?),
                "stall_attempts" => script.stall_attempts = num()? as usize,
                "fail_status" => script.fail_status = Some(num()? as u16),
                "drop_after" => script.drop_after = Some(num()? as usize),
                other => return Err(format!("unknown mock parameter {other:?}")),
            }
        }
        Ok(script)
    }
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'+' => out.push(b' '),
            b'%' if i + 2 < bytes.len() => {
                match u8::from_str_radix(std::str::from_utf8(&bytes[i + 1..i + 3]).unwrap_or("zz"), 16) {
                    Ok(b) => {
                        out.push(b);
                        i += 2;
                    }
                    Err(_) => out.push(b'%'),
                }
            }
            b => out.push(b),
        }
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

/// Splits text into increments that concatenate back to it exactly: each
/// word keeps its trailing whitespace.
pub fn word_increments(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            in_space = true;
        } else if in_space {
            out.push(std::mem::take(&mut cur));
            in_space = false;
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    calls: AtomicUsize,
    seen: Mutex<Vec<ChatRequest>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            ..Self::default()
        }
    }

    pub fn from_url(url: &str) -> Result<Self, String> {
        Ok(Self::new(MockScript::from_url(url)?))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Requests received so far, in call order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("mock log poisoned").clone()
    }

    fn answer_words(&self, request: &ChatRequest) -> Vec<String> {
        let words = match &self.script.reply {
            Some(r) => word_increments(r),
            None => {
                let user = request
                    .messages
                    .iter()
                    .rev()
                    .find(|m| m.role == "user")
                    .map(|m| m.content.as_str())
                    .unwrap_or("");
                let text = if user.contains("[S1]") {
                    "According to the retrieved sources [S1], the answer is grounded in the provided documents."
                } else {
                    "No supporting documents were found for this question."
                };
                word_increments(text)
            }
        };
        match self.script.tokens {
            Some(n) if !words.is_empty() => words.iter().cycle().take(n).cloned().collect(),
            Some(n) => (0..n).map(|i| format!("t{i} ")).collect(),
            None => words,
        }
    }
}

#[async_trait]
impl ChatBackend for MockBackend {
    async fn open_stream(&self, request: &ChatRequest) -> Result<EventStream, BackendError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        self.seen.lock().expect("mock log poisoned").push(request.clone());
        if let Some(status) = self.script.fail_status {
            return Err(BackendError::Status {
                status,
                body: format!("mock failure {status}"),
            });
        }
        if call < self.script.stall_attempts {
            // never yields; the caller's timer decides
            return Ok(stream::pending().boxed());
        }
        let words = self.answer_words(request);
        let cap = request.max_tokens as usize;
        let finish = if words.len() > cap { "length" } else { "stop" };
        let mut events: Vec<Result<StreamEvent, BackendError>> = words
            .into_iter()
            .take(cap)
            .map(|w| Ok(StreamEvent::Delta(w)))
            .collect();
        match self.script.drop_after {
            Some(n) if n < events.len() => {
                events.truncate(n);
                events.push(Err(BackendError::Dropped("mock connection reset".into())));
            }
            _ => events.push(Ok(StreamEvent::Finish(Some(finish.to_owned())))),
        }
        let delay = self.script.delay;
        Ok(stream::iter(events)
            .then(move |ev| async move {
                if !delay.is_zero() && matches!(ev, Ok(StreamEvent::Delta(_))) {
                    tokio::time::sleep(delay).await;
                }
                ev
            })
            .boxed())
    }
}
