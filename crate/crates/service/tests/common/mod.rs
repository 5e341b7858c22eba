#![allow(dead_code)]

use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};

use ragline_core::embed::EmbedError;
use ragline_core::generation::ModelProfile;
use ragline_core::ingest::{ingest_corpus, write_chunks_jsonl, ManifestEntry};
use ragline_core::{
    build_index, save_index, Chunk, ChunkingConfig, EmbeddingProvider, FeedbackStore, HashedBagOfWords,
    ProviderSpec,
};
use ragline_service::{decode_all, AppState, QueryEvent, ServiceConfig};
use reqwest::StatusCode;
use serde_json::Value;
use tempfile::TempDir;
use tokio::sync::oneshot;

pub const DOCS: [(&str, &str); 3] = [
    (
        "liming.txt",
        "Liming raises soil pH. Acidic fields in coastal regions often need lime every few years. \
         The amount of lime depends on soil type and the measured pH value. Clay soils need more lime than sandy soils. \
         Spread lime in autumn so rain can work it into the soil before spring sowing. \
         Too much lime can lock up trace elements such as manganese and boron. \
         A soil test every five years shows whether another liming round is needed.",
    ),
    (
        "rotation.md",
        "# Crop rotation basics\n\nRotating cereals with legumes restores nitrogen. \
         Peas and faba beans fix nitrogen from the air, which the next cereal crop can use. \
         A rotation that alternates oats, barley and grass ley breaks the cycle of soil-borne diseases. \
         Rotation also spreads the workload over the season and reduces the need for pesticides. \
         Farmers should plan rotations over at least four years.",
    ),
    (
        "drainage.txt",
        "Subsurface drainage removes excess water from fields. Blocked drains cause waterlogging in spring. \
         Drain pipes are usually laid one metre deep with a spacing of twelve to sixteen metres. \
         Inspect outlets every autumn and flush pipes when sediment builds up. \
         Good drainage lets machines enter the field earlier and improves root growth.",
    ),
];

pub fn chunking() -> ChunkingConfig {
    ChunkingConfig {
        max_chars: 160,
        overlap_chars: 40,
        ..ChunkingConfig::default()
    }
}

/// Writes the three-document corpus and returns the chunks it yields.
pub fn ingest_docs(dir: &Path, docs: &[(&str, &str)]) -> Vec<Chunk> {
    let corpus = dir.join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    let entries: Vec<ManifestEntry> = docs
        .iter()
        .map(|(name, text)| {
            let path = corpus.join(name);
            std::fs::write(&path, text).unwrap();
            ManifestEntry {
                path,
                title: None,
                language: None,
            }
        })
        .collect();
    ingest_corpus(&entries, &chunking(), None).unwrap().chunks
}

pub fn write_chunks(path: &Path, chunks: &[Chunk]) {
    write_chunks_jsonl(std::fs::File::create(path).unwrap(), chunks).unwrap();
}

pub struct Fixture {
    pub dir: TempDir,
    pub config: ServiceConfig,
    pub chunks: Vec<Chunk>,
}

pub fn mock_model(id: &str, url: &str) -> ModelProfile {
    let mut m = ModelProfile::new(id, url);
    m.request_timeout = 5.0;
    m
}

pub fn fixture(models: Vec<ModelProfile>) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let chunks = ingest_docs(dir.path(), &DOCS);
    let chunks_path = dir.path().join("chunks.jsonl");
    write_chunks(&chunks_path, &chunks);
    let index_path = dir.path().join("index.bin");
    let report = build_index(&chunks, &HashedBagOfWords::default(), 16).unwrap();
    save_index(&report.index, &index_path).unwrap();
    let config = ServiceConfig {
        bind: "127.0.0.1:0".into(),
        index_path,
        chunks_path,
        store_path: dir.path().join("store.db"),
        ui_languages: vec![ragline_core::Language::En, ragline_core::Language::Fi, ragline_core::Language::Sv],
        default_model: models[0].model_id.clone(),
        models,
        retrieval: Default::default(),
        embedding: ProviderSpec::default(),
        embed_batch_size: 4,
    };
    Fixture { dir, config, chunks }
}

pub fn default_fixture() -> Fixture {
    fixture(vec![mock_model("mock", "mock://mock"), mock_model("short", "mock://short?reply=Brief+answer.")])
}

pub struct Server {
    pub base: String,
    pub state: Arc<AppState>,
    pub client: reqwest::Client,
    stop: Option<oneshot::Sender<()>>,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
    }
}

pub async fn start(state: AppState) -> Server {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let state = Arc::new(state);
    let (tx, rx) = oneshot::channel();
    tokio::spawn(ragline_service::serve(listener, Arc::clone(&state), async {
        let _ = rx.await;
    }));
    Server {
        base,
        state,
        client: reqwest::Client::new(),
        stop: Some(tx),
    }
}

pub async fn start_fixture(fx: &Fixture) -> Server {
    start(AppState::from_config(fx.config.clone()).unwrap()).await
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    pub async fn query(&self, body: Value) -> (StatusCode, Vec<QueryEvent>, Value) {
        let resp = self.client.post(self.url("/api/query")).json(&body).send().await.unwrap();
        let status = resp.status();
        let bytes = resp.bytes().await.unwrap();
        if status.is_success() {
            (status, decode_all(&bytes).unwrap(), Value::Null)
        } else {
            (status, Vec::new(), serde_json::from_slice(&bytes).unwrap_or(Value::Null))
        }
    }

    pub async fn get_json(&self, path: &str) -> (StatusCode, Value) {
        let resp = self.client.get(self.url(path)).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn post_json(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let resp = self.client.post(self.url(path)).json(&body).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }
}

pub fn answer_of(events: &[QueryEvent]) -> String {
    events
        .iter()
        .filter_map(|e| match e {
            QueryEvent::Token(t) => Some(t.as_str()),
            _ => None,
        })
        .collect()
}

pub fn done_of(events: &[QueryEvent]) -> ragline_service::DoneData {
    match events.last() {
        Some(QueryEvent::Done(d)) => d.clone(),
        other => panic!("stream did not end with done: {other:?}"),
    }
}

/// Local embedder whose multi-text batches wait until released, so a
/// rebuild can be held open while single-text queries pass through.
pub struct GatedProvider {
    inner: HashedBagOfWords,
    open: Mutex<bool>,
    cv: Condvar,
}

impl GatedProvider {
    pub fn new() -> Self {
        Self {
            inner: HashedBagOfWords::default(),
            open: Mutex::new(false),
            cv: Condvar::new(),
        }
    }

    pub fn release(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }
}

impl EmbeddingProvider for GatedProvider {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn dim(&self) -> Option<usize> {
        self.inner.dim()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        if texts.len() > 1 {
            let mut open = self.open.lock().unwrap();
            while !*open {
                open = self.cv.wait(open).unwrap();
            }
        }
        self.inner.embed_batch(texts)
    }
}

pub fn state_with_provider(fx: &Fixture, provider: Arc<dyn EmbeddingProvider>) -> AppState {
    let store = FeedbackStore::open(&fx.config.store_path).unwrap();
    AppState::with_parts(fx.config.clone(), provider, store).unwrap()
}
