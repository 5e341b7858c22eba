//! Interaction log and user ratings in a single-file SQLite database.
//!
//! The database runs in WAL mode with full sync, so a call that returned has
//! been committed durably. All access goes through one connection guarded by
//! a mutex, which serializes writers and makes every operation atomic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::RetrievalMode;

pub const SCHEMA_VERSION: i32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage error: {0}")]
    Storage(#[from] rusqlite::Error),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid record: {0}")]
    Validation(String),
    #[error("stored data is malformed: {0}")]
    Malformed(String),
    #[error("store schema version {found} is newer than supported {supported}")]
    SchemaVersion { found: i32, supported: i32 },
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedChunk {
    pub chunk_id: String,
    pub score: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub interaction_id: String,
    pub session_id: String,
    pub query_text: String,
    pub retrieved: Vec<RetrievedChunk>,
    pub answer_text: String,
    pub model_id: String,
    pub retrieval_mode: RetrievalMode,
    pub created_at: DateTime<Utc>,
    pub latency_ms: u64,
}

impl InteractionRecord {
    /// Fresh record with a random id and the current time.
    pub fn new(session_id: impl Into<String>, query_text: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            interaction_id: uuid::Uuid::new_v4().to_string(),
            session_id: session_id.into(),
            query_text: query_text.into(),
            retrieved: Vec::new(),
            answer_text: String::new(),
            model_id: model_id.into(),
            retrieval_mode: RetrievalMode::FullChunk,
            created_at: Utc::now(),
            latency_ms: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("interaction_id", &self.interaction_id),
            ("session_id", &self.session_id),
            ("query_text", &self.query_text),
            ("model_id", &self.model_id),
        ] {
            if value.trim().is_empty() {
                return Err(StoreError::Validation(format!("{name} is required")));
            }
        }
        if self.retrieved.windows(2).any(|w| w[0].score < w[1].score) {
            return Err(StoreError::Validation("retrieved scores must be descending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub interaction_id: String,
    pub rating: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    /// Human-entered judgements such as factual accuracy or fluency.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
    pub rated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryItem {
    #[serde(flatten)]
    pub interaction: InteractionRecord,
    pub feedback: Option<FeedbackRecord>,
}

/// One line of the bulk JSON Lines export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    #[serde(flatten)]
    pub interaction: InteractionRecord,
    #[serde(default)]
    pub rating: Option<u8>,
    #[serde(default)]
    pub comment: Option<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub rated_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Html,
    Md,
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "html" => Ok(ExportFormat::Html),
            "md" | "markdown" => Ok(ExportFormat::Md),
            other => Err(format!("unknown export format {other:?}")),
        }
    }
}

impl ExportFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            ExportFormat::Html => "text/html; charset=utf-8",
            ExportFormat::Md => "text/markdown; charset=utf-8",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Html => "html",
            ExportFormat::Md => "md",
        }
    }
}

fn ts(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Nanos, true)
}

fn parse_ts(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| StoreError::Malformed(format!("timestamp {s:?}: {e}")))
}

pub fn validate_rating(rating: i64) -> Result<u8> {
    if (1..=5).contains(&rating) {
        Ok(rating as u8)
    } else {
        Err(StoreError::Validation(format!("rating must be between 1 and 5, got {rating}")))
    }
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS interactions (
    seq            INTEGER PRIMARY KEY AUTOINCREMENT,
    interaction_id TEXT NOT NULL UNIQUE,
    session_id     TEXT NOT NULL,
    query_text     TEXT NOT NULL,
    retrieved      TEXT NOT NULL,
    answer_text    TEXT NOT NULL,
    model_id       TEXT NOT NULL,
    retrieval_mode TEXT NOT NULL,
    created_at     TEXT NOT NULL,
    latency_ms     INTEGER NOT NULL CHECK (latency_ms >= 0)
);
CREATE INDEX IF NOT EXISTS interactions_session ON interactions (session_id, created_at, seq);
CREATE TABLE IF NOT EXISTS feedback (
    interaction_id TEXT PRIMARY KEY REFERENCES interactions (interaction_id),
    rating         INTEGER NOT NULL CHECK (rating BETWEEN 1 AND 5),
    comment        TEXT,
    labels         TEXT NOT NULL DEFAULT '{}',
    rated_at       TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS feedback_audit (
    seq            INTEGER PRIMARY KEY AUTOINCREMENT,
    interaction_id TEXT NOT NULL REFERENCES interactions (interaction_id),
    rating         INTEGER NOT NULL,
    comment        TEXT,
    labels         TEXT NOT NULL DEFAULT '{}',
    rated_at       TEXT NOT NULL,
    replaced_at    TEXT NOT NULL
);
";

pub struct FeedbackStore {
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for FeedbackStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeedbackStore").finish_non_exhaustive()
    }
}

impl FeedbackStore {
    pub fn open(path: &Path) -> Result<Self> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self> {
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        let version: i32 = conn.pragma_query_value(None, "user_version", |r| r.get(0))?;
        if version > SCHEMA_VERSION {
            return Err(StoreError::SchemaVersion {
                found: version,
                supported: SCHEMA_VERSION,
            });
        }
        conn.execute_batch(SCHEMA)?;
        conn.pragma_update(None, "user_version", SCHEMA_VERSION)?;
        Ok(Self { conn: Mutex::new(conn) })
    }

    fn conn(&self) -> std::sync::MutexGuard<'_, Connection> {
        // a panic while holding the lock cannot leave a half-applied transaction
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Cheap liveness probe.
    pub fn ping(&self) -> bool {
        self.conn()
            .query_row("SELECT count(*) FROM interactions", [], |r| r.get::<_, i64>(0))
            .is_ok()
    }

    pub fn record_interaction(&self, rec: &InteractionRecord) -> Result<String> {
        rec.validate()?;
        let retrieved = serde_json::to_string(&rec.retrieved).map_err(|e| StoreError::Malformed(e.to_string()))?;
        self.conn().execute(
            "INSERT INTO interactions (interaction_id, session_id, query_text, retrieved, answer_text,
                model_id, retrieval_mode, created_at, latency_ms)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
            params![
                rec.interaction_id,
                rec.session_id,
                rec.query_text,
                retrieved,
                rec.answer_text,
                rec.model_id,
                rec.retrieval_mode.as_str(),
                ts(&rec.created_at),
                rec.latency_ms as i64,
            ],
        )?;
        Ok(rec.interaction_id.clone())
    }

    pub fn get_interaction(&self, interaction_id: &str) -> Result<Option<InteractionRecord>> {
        let conn = self.conn();
        let row = conn
            .query_row(
                &format!("{SELECT_INTERACTION} WHERE interaction_id = ?1"),
                [interaction_id],
                raw_interaction,
            )
            .optional()?;
        row.map(RawInteraction::into_record).transpose()
    }

    /// Attaches a rating. A re-rating replaces the current value and moves
    /// the previous one to the audit list.
    pub fn record_feedback(
        &self,
        interaction_id: &str,
        rating: i64,
        comment: Option<&str>,
        labels: &BTreeMap<String, String>,
    ) -> Result<FeedbackRecord> {
        let rating = validate_rating(rating)?;
        let labels_json = serde_json::to_string(labels).map_err(|e| StoreError::Malformed(e.to_string()))?;
        let rated_at = Utc::now();
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        let exists: bool = tx
            .query_row(
                "SELECT 1 FROM interactions WHERE interaction_id = ?1",
                [interaction_id],
                |_| Ok(()),
            )
            .optional()?
            .is_some();
        if !exists {
            return Err(StoreError::NotFound(format!("interaction {interaction_id}")));
        }
        tx.execute(
            "INSERT INTO feedback_audit (interaction_id, rating, comment, labels, rated_at, replaced_at)
             SELECT interaction_id, rating, comment, labels, rated_at, ?2 FROM feedback WHERE interaction_id = ?1",
            params![interaction_id, ts(&rated_at)],
        )?;
        tx.execute(
            "INSERT INTO feedback (interaction_id, rating, comment, labels, rated_at)
             VALUES (?1, ?2, ?3, ?4, ?5)
             ON CONFLICT (interaction_id) DO UPDATE SET
                rating = excluded.rating, comment = excluded.comment,
                labels = excluded.labels, rated_at = excluded.rated_at",
            params![interaction_id, rating, comment, labels_json, ts(&rated_at)],
        )?;
        tx.commit()?;
        Ok(FeedbackRecord {
            interaction_id: interaction_id.to_owned(),
            rating,
            comment: comment.map(str::to_owned),
            labels: labels.clone(),
            rated_at,
        })
    }

    pub fn current_feedback(&self, interaction_id: &str) -> Result<Option<FeedbackRecord>> {
        let conn = self.conn();
        conn.query_row(
            "SELECT interaction_id, rating, comment, labels, rated_at FROM feedback WHERE interaction_id = ?1",
            [interaction_id],
            raw_feedback,
        )
        .optional()?
        .map(RawFeedback::into_record)
        .transpose()
    }

    /// Superseded ratings, oldest first.
    pub fn feedback_audit(&self, interaction_id: &str) -> Result<Vec<FeedbackRecord>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT interaction_id, rating, comment, labels, rated_at FROM feedback_audit
             WHERE interaction_id = ?1 ORDER BY seq",
        )?;
        let rows = stmt.query_map([interaction_id], raw_feedback)?;
        rows.map(|r| r?.into_record()).collect()
    }

    /// Interactions of one session in creation order, with current ratings.
    pub fn session_history(&self, session_id: &str) -> Result<Vec<HistoryItem>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "{SELECT_INTERACTION_WITH_FEEDBACK} WHERE i.session_id = ?1 ORDER BY i.created_at, i.seq"
        ))?;
        let rows = stmt.query_map([session_id], raw_history)?;
        rows.map(|r| r?.into_item()).collect()
    }

    /// Every interaction with its current rating, in insertion order.
    pub fn export_all(&self) -> Result<Vec<ExportRecord>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!("{SELECT_INTERACTION_WITH_FEEDBACK} ORDER BY i.seq"))?;
        let rows = stmt.query_map([], raw_history)?;
        rows.map(|r| {
            let item = r?.into_item()?;
            let fb = item.feedback;
            Ok(ExportRecord {
                interaction: item.interaction,
                rating: fb.as_ref().map(|f| f.rating),
                comment: fb.as_ref().and_then(|f| f.comment.clone()),
                labels: fb.as_ref().map(|f| f.labels.clone()).unwrap_or_default(),
                rated_at: fb.map(|f| f.rated_at),
            })
        })
        .collect()
    }

    pub fn export_history(&self, session_id: &str, format: ExportFormat) -> Result<Vec<u8>> {
        let items = self.session_history(session_id)?;
        if items.is_empty() {
            return Err(StoreError::NotFound(format!("session {session_id}")));
        }
        Ok(render_history(session_id, &items, format).into_bytes())
    }
}

const SELECT_INTERACTION: &str = "SELECT interaction_id, session_id, query_text, retrieved, answer_text,
    model_id, retrieval_mode, created_at, latency_ms FROM interactions";

const SELECT_INTERACTION_WITH_FEEDBACK: &str = "SELECT i.interaction_id, i.session_id, i.query_text,
    i.retrieved, i.answer_text, i.model_id, i.retrieval_mode, i.created_at, i.latency_ms,
    f.rating, f.comment, f.labels, f.rated_at
    FROM interactions i LEFT JOIN feedback f ON f.interaction_id = i.interaction_id";

struct RawInteraction {
    interaction_id: String,
    session_id: String,
    query_text: String,
    retrieved: String,
    answer_text: String,
    model_id: String,
    retrieval_mode: String,
    created_at: String,
    latency_ms: i64,
}

fn raw_interaction(r: &rusqlite::Row<'_>) -> rusqlite::Result<RawInteraction> {
    Ok(RawInteraction {
        interaction_id: r.get(0)?,
        session_id: r.get(1)?,
        query_text: r.get(2)?,
        retrieved: r.get(3)?,
        answer_text: r.get(4)?,
        model_id: r.get(5)?,
        retrieval_mode: r.get(6)?,
        created_at: r.get(7)?,
        latency_ms: r.get(8)?,
    })
}

impl RawInteraction {
    fn into_record(self) -> Result<InteractionRecord> {
        Ok(InteractionRecord {
            retrieved: serde_json::from_str(&self.retrieved).map_err(|e| StoreError::Malformed(e.to_string()))?,
            retrieval_mode: self.retrieval_mode.parse().map_err(StoreError::Malformed)?,
            created_at: parse_ts(&self.created_at)?,
            latency_ms: self.latency_ms.max(0) as u64,
            interaction_id: self.interaction_id,
            session_id: self.session_id,
            query_text: self.query_text,
            answer_text: self.answer_text,
            model_id: self.model_id,
        })
    }
}

struct RawFeedback {
    interaction_id: String,
    rating: i64,
    comment: Option<String>,
    labels: String,
    rated_at: String,
}

fn raw_feedback(r: &rusqlite::Row<'_>) -> rusqlite::Result<RawFeedback> {
    Ok(RawFeedback {
        interaction_id: r.get(0)?,
        rating: r.get(1)?,
        comment: r.get(2)?,
        labels: r.get(3)?,
        rated_at: r.get(4)?,
    })
}

impl RawFeedback {
    fn into_record(self) -> Result<FeedbackRecord> {
        Ok(FeedbackRecord {
            interaction_id: self.interaction_id,
            rating: validate_rating(self.rating).map_err(|e| StoreError::Malformed(e.to_string()))?,
            comment: self.comment,
            labels: serde_json::from_str(&self.labels).map_err(|e| StoreError::Malformed(e.to_string()))?,
            rated_at: parse_ts(&self.rated_at)?,
        })
    }
}

struct RawHistory {
    interaction: RawInteraction,
    feedback: Option<(i64, Option<String>, String, String)>,
}

fn raw_history(r: &rusqlite::Row<'_>) -> rusqlite::Result<RawHistory> {
    let rating: Option<i64> = r.get(9)?;
    let feedback = match rating {
        Some(rating) => Some((rating, r.get(10)?, r.get(11)?, r.get(12)?)),
        None => None,
    };
    Ok(RawHistory {
        interaction: raw_interaction(r)?,
        feedback,
    })
}

impl RawHistory {
    fn into_item(self) -> Result<HistoryItem> {
        let interaction = self.interaction.into_record()?;
        let feedback = self
            .feedback
            .map(|(rating, comment, labels, rated_at)| {
                RawFeedback {
                    interaction_id: interaction.interaction_id.clone(),
                    rating,
                    comment,
                    labels,
                    rated_at,
                }
                .into_record()
            })
            .transpose()?;
        Ok(HistoryItem { interaction, feedback })
    }
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn source_label(i: usize, s: &RetrievedChunk) -> String {
    let mut label = format!("[S{}] ", i + 1);
    match (&s.title, &s.source_path) {
        (Some(t), Some(p)) => label.push_str(&format!("{t} ({p}) ")),
        (Some(t), None) => label.push_str(&format!("{t} ")),
        (None, Some(p)) => label.push_str(&format!("{p} ")),
        (None, None) => {}
    }
    label.push_str(&format!("{} score {:.3}", s.chunk_id, s.score));
    label
}

fn rating_label(fb: &Option<FeedbackRecord>) -> String {
    match fb {
        Some(f) => match &f.comment {
            Some(c) if !c.trim().is_empty() => format!("{}/5 ({})", f.rating, c.trim()),
            _ => format!("{}/5", f.rating),
        },
        None => "not rated".to_owned(),
    }
}

/// Renders a printable conversation transcript. Output depends only on the
/// stored records, so repeated exports are byte-identical.
pub fn render_history(session_id: &str, items: &[HistoryItem], format: ExportFormat) -> String {
    let mut out = String::new();
    match format {
        ExportFormat::Md => {
            let _ = writeln!(out, "# Conversation history\n\nSession: `{session_id}`\n");
            for (n, item) in items.iter().enumerate() {
                let i = &item.interaction;
                let _ = writeln!(out, "## {}. {} · {}\n", n + 1, ts(&i.created_at), i.model_id);
                let _ = writeln!(out, "**Question:**\n\n{}\n", i.query_text);
                let _ = writeln!(out, "**Answer:**\n\n{}\n", i.answer_text);
                if !i.retrieved.is_empty() {
                    let _ = writeln!(out, "**Sources:**\n");
                    for (k, s) in i.retrieved.iter().enumerate() {
                        let _ = writeln!(out, "- {}", source_label(k, s));
                    }
                    out.push('\n');
                }
                let _ = writeln!(out, "**Rating:** {}\n", rating_label(&item.feedback));
            }
        }
        ExportFormat::Html => {
            let _ = write!(
                out,
                "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Conversation history {sid}</title>\n\
                 <style>body{{font-family:sans-serif;max-width:50em;margin:2em auto}}\
                 .turn{{page-break-inside:avoid;border-top:1px solid #999;padding-top:1em}}\
                 .answer{{white-space:pre-wrap}}@media print{{body{{margin:0}}}}</style>\n</head>\n<body>\n\
                 <h1>Conversation history</h1>\n<p>Session: <code>{sid}</code></p>\n",
                sid = escape_html(session_id)
            );
            for (n, item) in items.iter().enumerate() {
                let i = &item.interaction;
                let _ = writeln!(
                    out,
                    "<section class=\"turn\">\n<h2>{}. {} · {}</h2>",
                    n + 1,
                    ts(&i.created_at),
                    escape_html(&i.model_id)
                );
                let _ = writeln!(out, "<h3>Question</h3>\n<p class=\"question\">{}</p>", escape_html(&i.query_text));
                let _ = writeln!(out, "<h3>Answer</h3>\n<div class=\"answer\">{}</div>", escape_html(&i.answer_text));
                if !i.retrieved.is_empty() {
                    out.push_str("<h3>Sources</h3>\n<ul>\n");
                    for (k, s) in i.retrieved.iter().enumerate() {
                        let _ = writeln!(out, "<li>{}</li>", escape_html(&source_label(k, s)));
                    }
                    out.push_str("</ul>\n");
                }
                let _ = writeln!(
                    out,
                    "<p class=\"rating\">Rating: {}</p>\n</section>",
                    escape_html(&rating_label(&item.feedback))
                );
            }
            out.push_str("</body>\n</html>\n");
        }
    }
    out
}
