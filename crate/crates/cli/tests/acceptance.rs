//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, ExitCode, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ragline_core::eval::RATINGS;
use ragline_core::index::{IndexError, INDEX_MAGIC};
use ragline_core::ingest::{write_chunks_jsonl, BoundaryMode};
use ragline_core::retrieval::{retrieve, KnowledgeBase, RetrievalMode};
use ragline_core::{
    build_index, chunk_document, compare_rounds, likert_report, load_index, normalize, save_index, Chunk,
    ChunkingConfig, HashedBagOfWords, IndexEntry, Language, SourceDocument, VectorIndex,
};
use ragline_service::{decode_all, AppState, QueryEvent, ServiceConfig};
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Ranked = Vec<(String, f32)>;
type Check<'a> = Box<dyn FnOnce() -> Outcome + 'a>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn expand(counts: [u64; 5]) -> Vec<i64> {
    counts
        .iter()
        .zip(1i64..)
        .flat_map(|(&c, r)| std::iter::repeat_n(r, c as usize))
        .collect()
}

const APRIL: [u64; 5] = [15, 16, 17, 17, 2];
const AUGUST: [u64; 5] = [9, 9, 15, 4, 10];

fn likert_rows() -> Outcome {
    let april = likert_report("April 2025", &expand(APRIL)).map_err(|e| e.to_string())?;
    let august = likert_report("August 2025", &expand(AUGUST)).map_err(|e| e.to_string())?;
    let row = |r: &ragline_core::LikertReport| RATINGS.iter().map(|&k| r.percent(k)).collect::<Vec<_>>();
    ensure!(april.total == 67 && august.total == 47, "totals {} / {}", april.total, august.total);
    ensure!(row(&april) == [22, 24, 25, 25, 3], "April row {:?}", row(&april));
    ensure!(row(&august) == [19, 19, 32, 9, 21], "August row {:?}", row(&august));
    ensure!(april.percent_sum() == 99, "April sums to {}", april.percent_sum());
    ensure!(august.percent_sum() == 100, "August sums to {}", august.percent_sum());
    Ok(format!(
        "April {:?} (sum {}), August {:?} (sum {})",
        row(&april),
        april.percent_sum(),
        row(&august),
        august.percent_sum()
    ))
}

fn share_deltas() -> Outcome {
    let april = likert_report("April 2025", &expand(APRIL)).map_err(|e| e.to_string())?;
    let august = likert_report("August 2025", &expand(AUGUST)).map_err(|e| e.to_string())?;
    let c = compare_rounds(&april, &august);
    let got = [
        (c.low_share.from, c.low_share.to),
        (c.top_share.from, c.top_share.to),
        (c.mid_share.from, c.mid_share.to),
    ];
    ensure!(got == [(46, 38), (3, 21), (25, 32)], "low/top/mid {:?}", got);
    Ok(format!(
        "low {}→{}, top {}→{}, mid {}→{}",
        got[0].0, got[0].1, got[1].0, got[1].1, got[2].0, got[2].1
    ))
}

fn exact_score(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum::<f64>() as f32
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        if let Ok(u) = normalize(&v) {
            return u.values().to_vec();
        }
    }
}

fn search_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let (mut instances, mut tie_instances, mut hits_checked) = (0, 0, 0);
    for case in 0..300 {
        let dim = rng.random_range(1..=32);
        let n = rng.random_range(1..=64);
        let mut vectors: Vec<Vec<f32>> = Vec::with_capacity(n);
        for _ in 0..n {
            if !vectors.is_empty() && rng.random_bool(0.25) {
                let j = rng.random_range(0..vectors.len());
                vectors.push(vectors[j].clone());
            } else {
                vectors.push(random_unit(&mut rng, dim));
            }
        }
        let entries: Vec<IndexEntry> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| IndexEntry {
                chunk_id: format!("c{:03}", (i * 37) % 1000),
                vector: ragline_core::EmbeddingVector::from_unit(v.clone()).unwrap(),
            })
            .collect();
        let ids: HashSet<&str> = entries.iter().map(|e| e.chunk_id.as_str()).collect();
        if ids.len() != entries.len() {
            continue;
        }
        let index = VectorIndex::new(dim, "test", entries.clone(), chrono::Utc::now()).map_err(|e| e.to_string())?;
        let query = if rng.random_bool(0.3) {
            vectors[rng.random_range(0..n)].clone()
        } else {
            random_unit(&mut rng, dim)
        };
        let q = ragline_core::EmbeddingVector::from_unit(query.clone()).unwrap();
        let k = rng.random_range(1..=8);
        let threshold = if rng.random_bool(0.3) { -1.0 } else { rng.random_range(-1.0f32..1.0) };

        let mut oracle: Vec<(f32, &str)> = entries
            .iter()
            .map(|e| (exact_score(&query, e.vector.values()), e.chunk_id.as_str()))
            .filter(|(s, _)| *s >= threshold)
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        oracle.truncate(k);
        let got = index.search(&q, k, threshold).map_err(|e| e.to_string())?;

        ensure!(got.len() == oracle.len(), "case {case}: {} hits, oracle {}", got.len(), oracle.len());
        for (g, (s, id)) in got.iter().zip(&oracle) {
            ensure!(g.chunk_id == *id, "case {case}: id {} vs oracle {id}", g.chunk_id);
            ensure!((g.score - s).abs() <= 1e-6, "case {case}: score {} vs {s}", g.score);
        }
        let scores: Vec<u32> = oracle.iter().map(|(s, _)| s.to_bits()).collect();
        if scores.windows(2).any(|w| w[0] == w[1]) {
            tie_instances += 1;
        }
        hits_checked += got.len();
        instances += 1;
    }
    ensure!(instances >= 200, "only {instances} instances generated");
    ensure!(tie_instances > 0, "no tie cases were exercised");
    Ok(format!("{instances} instances ({tie_instances} with tied scores), {hits_checked} hits identical to the oracle"))
}

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    const WORDS: &[&str] = &[
        "lime", "soil", "pH", "nurmi", "sato", "åker", "växt", "väg", "ö", "€", "rotation", "drain", "Kalkitus",
    ];
    let mut s = String::new();
    while s.chars().count() < len {
        s.push_str(WORDS[rng.random_range(0..WORDS.len())]);
        s.push_str(match rng.random_range(0..10) {
            0 => ". ",
            1 => "! ",
            2 => "?\n",
            3 => "…",
            4 => "\n\n",
            _ => " ",
        });
    }
    s.chars().take(len).collect()
}

fn doc(text: String, i: usize) -> SourceDocument {
    SourceDocument {
        doc_id: format!("doc{i}"),
        title: format!("Doc {i}"),
        language: Language::En,
        text,
        source_path: format!("doc{i}.txt"),
        ingested_at: chrono::Utc::now(),
    }
}

fn index_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    let chunks: Vec<Chunk> = (0..120)
        .map(|i| {
            let len = rng.random_range(5..400);
            Chunk {
                chunk_id: format!("d{}#{}", i / 10, i % 10),
                doc_id: format!("d{}", i / 10),
                ordinal: i % 10,
                text: random_text(&mut rng, len),
                span: (0, len),
                metadata: Default::default(),
            }
        })
        .collect();
    let provider = HashedBagOfWords::new(64);
    let built = build_index(&chunks, &provider, 7).map_err(|e| e.to_string())?.index;
    let worst = |idx: &VectorIndex| {
        idx.entries()
            .iter()
            .map(|e| (e.vector.norm() - 1.0).abs())
            .fold(0.0f64, f64::max)
    };
    ensure!(worst(&built) <= 1e-6, "norm deviation after build {}", worst(&built));
    let path = dir.path().join("index.bin");
    save_index(&built, &path).map_err(|e| e.to_string())?;
    let loaded = load_index(&path).map_err(|e| e.to_string())?;
    ensure!(worst(&loaded) <= 1e-6, "norm deviation after load {}", worst(&loaded));
    ensure!(
        built.to_bytes().unwrap() == loaded.to_bytes().unwrap(),
        "re-serialized bytes differ"
    );
    for _ in 0..50 {
        let q = normalize(&provider.embed_one(&random_text(&mut rng, 60))).map_err(|e| e.to_string());
        let Ok(q) = q else { continue };
        let k = rng.random_range(1..=10);
        let a = built.search(&q, k, -1.0).unwrap();
        let b = loaded.search(&q, k, -1.0).unwrap();
        let bits = |h: &[ragline_core::SearchHit]| h.iter().map(|h| (h.chunk_id.clone(), h.score.to_bits())).collect::<Vec<_>>();
        ensure!(bits(&a) == bits(&b), "round-trip search differs");
    }

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mut rejected = 0;
    let check = |name: &str, data: Vec<u8>| -> Result<(), String> {
        let p = dir.path().join(format!("bad-{name}.bin"));
        std::fs::write(&p, data).map_err(|e| e.to_string())?;
        match load_index(&p) {
            Err(IndexError::Corrupt { .. }) => Ok(()),
            other => Err(format!("{name}: expected CorruptIndex, got {other:?}")),
        }
    };
    for cut in [0, 3, 4, 10, 20, bytes.len() / 2, bytes.len() - 1] {
        check(&format!("cut{cut}"), bytes[..cut].to_vec())?;
        rejected += 1;
    }
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"XGRA");
    assert_ne!(&magic[..4], &INDEX_MAGIC);
    check("magic", magic)?;
    let mut version = bytes.clone();
    version[4] = 9;
    check("version", version)?;
    let mut trailing = bytes.clone();
    trailing.push(0);
    check("trailing", trailing)?;
    let mut scaled = bytes.clone();
    let last = scaled.len() - 4;
    let v = f32::from_le_bytes(scaled[last..].try_into().unwrap());
    scaled[last..].copy_from_slice(&(v + 0.5).to_le_bytes());
    check("norm", scaled)?;
    rejected += 4;
    Ok(format!(
        "{} entries, max norm error {:.1e}, byte-identical round trip, {rejected} corrupt files rejected",
        loaded.len(),
        worst(&loaded)
    ))
}

fn chunk_reconstruction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let mut total_chunks = 0;
    for case in 0..100 {
        let len = if case == 0 { 0 } else { rng.random_range(0..=20_000) };
        let text = random_text(&mut rng, len);
        let max_chars = rng.random_range(1..=2500);
        let overlap = rng.random_range(0..max_chars);
        let d = doc(text.clone(), case);
        let chars: Vec<char> = text.chars().collect();

        let hard = ChunkingConfig {
            max_chars,
            overlap_chars: overlap,
            boundary_mode: BoundaryMode::Hard,
        };
        let chunks = chunk_document(&d, &hard).map_err(|e| e.to_string())?;
        let mut rebuilt = String::new();
        for (i, c) in chunks.iter().enumerate() {
            let drop = if i == 0 {
                0
            } else {
                let prev = &chunks[i - 1];
                overlap.min(prev.span.1 - prev.span.0)
            };
            ensure!(c.text.chars().count() <= max_chars, "case {case}: chunk over max_chars");
            ensure!(c.span.0 == i * (max_chars - overlap), "case {case}: hard chunk {i} starts at {}", c.span.0);
            rebuilt.extend(c.text.chars().skip(drop));
        }
        ensure!(rebuilt == text, "case {case}: hard-mode reconstruction differs (len {len}, max {max_chars}, overlap {overlap})");

        let sentence = ChunkingConfig {
            boundary_mode: BoundaryMode::Sentence,
            ..hard
        };
        let chunks = chunk_document(&d, &sentence).map_err(|e| e.to_string())?;
        let mut covered = 0usize;
        for (i, c) in chunks.iter().enumerate() {
            let (s, e) = c.span;
            ensure!(s < e && e <= chars.len(), "case {case}: bad span {:?}", c.span);
            ensure!(c.text == chars[s..e].iter().collect::<String>(), "case {case}: text differs from span");
            ensure!(s <= covered, "case {case}: gap before chunk {i}");
            ensure!(i == 0 || s > chunks[i - 1].span.0, "case {case}: spans not monotone");
            ensure!(e - s <= max_chars, "case {case}: sentence chunk over max_chars");
            ensure!(
                i + 1 == chunks.len() || e - s > overlap,
                "case {case}: non-final chunk shorter than overlap+1"
            );
            covered = covered.max(e);
        }
        ensure!(covered == chars.len(), "case {case}: cover ends at {covered} of {}", chars.len());
        total_chunks += chunks.len();
    }
    Ok(format!("100 documents (0–20000 chars), {total_chunks} sentence-mode chunks, exact hard-mode reconstruction"))
}

fn mode_contract() -> Outcome {
    let provider = HashedBagOfWords::default();
    let make = |docs: &[(&str, &[&str])]| -> Result<KnowledgeBase, String> {
        let mut chunks = Vec::new();
        for (doc_id, texts) in docs {
            for (i, t) in texts.iter().enumerate() {
                chunks.push(Chunk {
                    chunk_id: Chunk::make_id(doc_id, i),
                    doc_id: (*doc_id).into(),
                    ordinal: i,
                    text: (*t).into(),
                    span: (0, t.chars().count()),
                    metadata: Default::default(),
                });
            }
        }
        let idx = build_index(&chunks, &provider, 16).map_err(|e| e.to_string())?.index;
        KnowledgeBase::new(idx, chunks).map_err(|e| e.to_string())
    };
    let run = |kb: &KnowledgeBase, q: &str, k: usize| -> Result<(Ranked, Ranked), String> {
        let f = retrieve(q, kb, &provider, k, 0.0, RetrievalMode::FullChunk).map_err(|e| e.to_string())?;
        let g = retrieve(q, kb, &provider, k, 0.0, RetrievalMode::FilenameGrouped).map_err(|e| e.to_string())?;
        let pick = |h: Vec<ragline_core::RetrievalHit>| h.into_iter().map(|h| (h.chunk_id, h.score)).collect();
        Ok((pick(f), pick(g)))
    };
    let doc_of = |id: &str| id.split('#').next().unwrap_or("").to_owned();

    // constructed: one document owns the three best chunks
    let kb = make(&[
        ("a", &["lime soil ph", "lime soil ph acid", "lime soil"]),
        ("b", &["lime water"]),
        ("c", &["lime farm machines tractor"]),
    ])?;
    let (full, grouped) = run(&kb, "lime soil ph", 3)?;
    ensure!(full.len() == 3 && grouped.len() == 3, "expected 3 hits each, got {} / {}", full.len(), grouped.len());
    let docs: BTreeSet<String> = grouped.iter().map(|(id, _)| doc_of(id)).collect();
    ensure!(docs.len() == grouped.len(), "grouped mode repeated a document: {grouped:?}");
    ensure!(full[0] == grouped[0], "rank 1 differs: {:?} vs {:?}", full[0], grouped[0]);
    for r in 1..3 {
        ensure!(full[r].1 > grouped[r].1, "rank {}: full {} not above grouped {}", r + 1, full[r].1, grouped[r].1);
    }

    // randomized corpora: grouped never beats full at any rank
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0006);
    let vocab = ["lime", "soil", "ph", "acid", "clay", "sand", "oats", "barley", "drain", "water", "peas", "manure"];
    for case in 0..60 {
        let n_docs = rng.random_range(1..6);
        let owned: Vec<(String, Vec<String>)> = (0..n_docs)
            .map(|d| {
                let n = rng.random_range(1..6);
                let texts = (0..n)
                    .map(|_| (0..rng.random_range(1..6)).map(|_| vocab[rng.random_range(0..vocab.len())]).collect::<Vec<_>>().join(" "))
                    .collect();
                (format!("d{d}"), texts)
            })
            .collect();
        let borrowed: Vec<Vec<&str>> = owned.iter().map(|(_, t)| t.iter().map(String::as_str).collect()).collect();
        let docs: Vec<(&str, &[&str])> = owned.iter().zip(&borrowed).map(|((d, _), t)| (d.as_str(), t.as_slice())).collect();
        let kb = make(&docs)?;
        let q = (0..3).map(|_| vocab[rng.random_range(0..vocab.len())]).collect::<Vec<_>>().join(" ");
        let k = rng.random_range(1..8);
        let (full, grouped) = run(&kb, &q, k)?;
        let distinct: BTreeSet<String> = grouped.iter().map(|(id, _)| doc_of(id)).collect();
        ensure!(distinct.len() == grouped.len(), "case {case}: grouped repeated a document");
        ensure!(grouped.len() <= full.len(), "case {case}: grouped returned more hits");
        for (r, (f, g)) in full.iter().zip(&grouped).enumerate() {
            ensure!(f.1 >= g.1, "case {case} rank {}: full {} below grouped {}", r + 1, f.1, g.1);
        }
    }
    Ok("one hit per document; full_chunk strictly higher at ranks 2–3 of the constructed corpus, never lower on 60 random corpora".into())
}

const FIXTURE: [(&str, &str); 3] = [
    (
        "liming.txt",
        "Liming raises soil pH. Acidic fields in coastal regions often need lime every few years. \
         The amount of lime depends on soil type and the measured pH value. Clay soils need more lime than sandy soils. \
         Spread lime in autumn so rain can work it into the soil before spring sowing.",
    ),
    (
        "rotation.md",
        "# Crop rotation basics\n\nRotating cereals with legumes restores nitrogen. \
         Peas and faba beans fix nitrogen from the air, which the next cereal crop can use. \
         A rotation that alternates oats, barley and grass ley breaks the cycle of soil-borne diseases.",
    ),
    (
        "drainage.txt",
        "Subsurface drainage removes excess water from fields. Blocked drains cause waterlogging in spring. \
         Drain pipes are usually laid one metre deep with a spacing of twelve to sixteen metres.",
    ),
];

fn ragline(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ragline"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("ragline {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

struct ServeProcess(Child);

impl Drop for ServeProcess {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_serve(config: &Path) -> Result<(ServeProcess, String), String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_ragline"))
        .args(["serve", "--config"])
        .arg(config)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let stderr = child.stderr.take().expect("piped stderr");
    let guard = ServeProcess(child);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stderr).lines().map_while(Result::ok) {
            let v: Value = serde_json::from_str(&line).unwrap_or(Value::Null);
            if v["fields"]["message"] == "listening" {
                let _ = tx.send(v["fields"]["addr"].as_str().unwrap_or("").to_owned());
            }
        }
    });
    let addr = rx
        .recv_timeout(Duration::from_secs(30))
        .map_err(|_| "server did not report its address".to_owned())?;
    Ok((guard, format!("http://{addr}")))
}

async fn query(client: &reqwest::Client, base: &str, body: Value) -> Result<Vec<QueryEvent>, String> {
    let resp = client
        .post(format!("{base}/api/query"))
        .json(&body)
        .send()
        .await
        .map_err(|e| e.to_string())?;
    let status = resp.status();
    let bytes = resp.bytes().await.map_err(|e| e.to_string())?;
    ensure!(status.is_success(), "query returned {status}: {}", String::from_utf8_lossy(&bytes));
    decode_all(&bytes)
}

fn tokens(events: &[QueryEvent]) -> (usize, String) {
    let t: Vec<&str> = events
        .iter()
        .filter_map(|e| match e {
            QueryEvent::Token(t) => Some(t.as_str()),
            _ => None,
        })
        .collect();
    (t.len(), t.concat())
}

async fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).map_err(|e| e.to_string())?;
    for (name, text) in FIXTURE {
        std::fs::write(corpus.join(name), text).map_err(|e| e.to_string())?;
    }
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let corpus_arg = corpus.to_string_lossy().into_owned();
    ragline(&["ingest", "--corpus", &corpus_arg, "--out", &p("chunks.jsonl"), "--max-chars", "160", "--overlap", "40"])?;
    let summary: Value = serde_json::from_str(&ragline(&["index", "--chunks", &p("chunks.jsonl"), "--out", &p("index.bin")])?)
        .map_err(|e| e.to_string())?;
    let lines = std::fs::read_to_string(p("chunks.jsonl")).map_err(|e| e.to_string())?.lines().count();
    ensure!(summary["entries"] == lines, "index has {} entries for {lines} chunk lines", summary["entries"]);

    let config = r#"bind = "127.0.0.1:0"
index_path = "index.bin"
chunks_path = "chunks.jsonl"
store_path = "store.db"
default_model = "mock"

[[models]]
model_id = "mock"
endpoint_url = "mock://mock"

[[models]]
model_id = "legacy"
endpoint_url = "mock://long?tokens=2500"
max_answer_tokens = 700

[[models]]
model_id = "extended"
endpoint_url = "mock://long?tokens=2500"
max_answer_tokens = 2000
"#;
    std::fs::write(p("ragline.toml"), config).map_err(|e| e.to_string())?;
    let (_server, base) = spawn_serve(&dir.path().join("ragline.toml"))?;
    let client = reqwest::Client::new();

    let question = "How often do acidic fields need lime?";
    let events = query(&client, &base, json!({"session_id": "e2e", "question": question})).await?;
    let QueryEvent::Sources(sources) = &events[0] else {
        return Err(format!("first event is {:?}", events[0]));
    };
    ensure!(!sources.is_empty(), "no sources");
    let first_token = events.iter().position(|e| matches!(e, QueryEvent::Token(_)));
    ensure!(first_token == Some(1), "sources do not precede tokens");
    let (n_tokens, streamed) = tokens(&events);
    let Some(QueryEvent::Done(done)) = events.last() else {
        return Err("stream did not end with done".into());
    };

    let history: Value = client
        .get(format!("{base}/api/history/e2e"))
        .send()
        .await
        .map_err(|e| e.to_string())?
        .json()
        .await
        .map_err(|e| e.to_string())?;
    let item = &history["items"][0];
    ensure!(item["interaction_id"] == done.interaction_id.as_str(), "interaction not retrievable");
    ensure!(item["answer_text"] == streamed.as_str(), "persisted answer differs from streamed tokens");
    let stored_ids: Vec<&str> = item["retrieved"].as_array().into_iter().flatten().filter_map(|r| r["chunk_id"].as_str()).collect();
    let sent_ids: Vec<&str> = sources.iter().map(|s| s.chunk_id.as_str()).collect();
    ensure!(stored_ids == sent_ids, "stored sources differ from streamed sources");

    for rating in 1..=5 {
        let status = client
            .post(format!("{base}/api/feedback"))
            .json(&json!({"interaction_id": done.interaction_id, "rating": rating}))
            .send()
            .await
            .map_err(|e| e.to_string())?
            .status();
        ensure!(status == 204, "rating {rating} returned {status}");
        let h: Value = client.get(format!("{base}/api/history/e2e")).send().await.map_err(|e| e.to_string())?.json().await.map_err(|e| e.to_string())?;
        ensure!(h["items"][0]["feedback"]["rating"] == rating, "rating {rating} did not round-trip");
    }

    for fmt in ["md", "html"] {
        let doc = client
            .get(format!("{base}/api/export/e2e?format={fmt}"))
            .send()
            .await
            .map_err(|e| e.to_string())?
            .text()
            .await
            .map_err(|e| e.to_string())?;
        ensure!(doc.contains(question), "{fmt} export does not contain the question");
    }

    let mut caps = Vec::new();
    for (model, cap) in [("legacy", 700usize), ("extended", 2000)] {
        let ev = query(&client, &base, json!({"session_id": model, "question": question, "model_id": model})).await?;
        let (n, _) = tokens(&ev);
        let truncated = matches!(ev.last(), Some(QueryEvent::Done(d)) if d.truncated);
        ensure!(n == cap && truncated, "{model}: {n} tokens (truncated {truncated}), cap {cap}");
        caps.push(n);
    }
    Ok(format!(
        "{lines} chunks indexed; {} sources then {n_tokens} tokens; answer persisted; ratings 1–5 round-trip; export has question; caps {:?}",
        sources.len(),
        caps
    ))
}

async fn reindex_atomicity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let provider = HashedBagOfWords::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0008);
    let corpus = |prefix: &str, docs: usize, rng: &mut ChaCha8Rng| -> Vec<Chunk> {
        (0..docs)
            .flat_map(|d| {
                let text = random_text(rng, 1200);
                let sd = SourceDocument {
                    doc_id: format!("{prefix}{d}"),
                    ..doc(text, d)
                };
                chunk_document(&sd, &ChunkingConfig { max_chars: 200, overlap_chars: 50, boundary_mode: BoundaryMode::Hard }).unwrap()
            })
            .collect()
    };
    let old = corpus("old", 10, &mut rng);
    let new = corpus("new", 40, &mut rng);
    let write = |path: &Path, chunks: &[Chunk]| write_chunks_jsonl(std::fs::File::create(path).unwrap(), chunks).unwrap();
    let chunks_path = dir.path().join("chunks.jsonl");
    let new_path = dir.path().join("new.jsonl");
    write(&chunks_path, &old);
    write(&new_path, &new);
    let index_path = dir.path().join("index.bin");
    save_index(&build_index(&old, &provider, 32).unwrap().index, &index_path).map_err(|e| e.to_string())?;
    let old_ids: HashSet<String> = old.iter().map(|c| c.chunk_id.clone()).collect();
    let new_ids: HashSet<String> = new.iter().map(|c| c.chunk_id.clone()).collect();

    let config = ServiceConfig {
        bind: "127.0.0.1:0".into(),
        index_path,
        chunks_path,
        store_path: dir.path().join("store.db"),
        ui_languages: vec![Language::En],
        default_model: "mock".into(),
        models: vec![ragline_core::ModelProfile::new("mock", "mock://mock?tokens=4&delay_ms=1")],
        retrieval: Default::default(),
        embedding: Default::default(),
        embed_batch_size: 8,
    };
    let state = Arc::new(AppState::from_config(config).map_err(|e| e.to_string())?);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    tokio::spawn(ragline_service::serve(listener, state, async {
        let _ = stop_rx.await;
    }));

    let stop = Arc::new(AtomicBool::new(false));
    let seq = Arc::new(AtomicUsize::new(0));
    let client = reqwest::Client::new();
    let mut workers = Vec::new();
    for w in 0..8 {
        let (stop, seq, client, base) = (stop.clone(), seq.clone(), client.clone(), base.clone());
        workers.push(tokio::spawn(async move {
            let mut seen = Vec::new();
            while !stop.load(Ordering::Relaxed) {
                let n = seq.fetch_add(1, Ordering::Relaxed);
                let r = query(&client, &base, json!({"session_id": format!("w{w}-{n}"), "question": "lime soil drain rotation"})).await;
                seen.push(r.and_then(|ev| match (ev.first(), ev.last()) {
                    (Some(QueryEvent::Sources(s)), Some(QueryEvent::Done(_))) => {
                        Ok(s.iter().map(|s| s.chunk_id.clone()).collect::<Vec<_>>())
                    }
                    _ => Err(format!("incomplete stream: {ev:?}")),
                }));
            }
            seen
        }));
    }
    tokio::time::sleep(Duration::from_millis(300)).await;
    let started = Instant::now();
    let resp = client
        .post(format!("{base}/api/admin/reindex"))
        .json(&json!({"chunks_path": new_path}))
        .send()
        .await
        .map_err(|e| e.to_string())?;
    ensure!(resp.status() == 200, "reindex returned {}", resp.status());
    let swap_ms = started.elapsed().as_millis();
    tokio::time::sleep(Duration::from_millis(300)).await;
    stop.store(true, Ordering::Relaxed);

    let (mut errors, mut mixed, mut on_old, mut on_new) = (0, 0, 0, 0);
    for w in workers {
        for r in w.await.map_err(|e| e.to_string())? {
            match r {
                Err(_) => errors += 1,
                Ok(ids) if !ids.is_empty() && ids.iter().all(|i| old_ids.contains(i)) => on_old += 1,
                Ok(ids) if !ids.is_empty() && ids.iter().all(|i| new_ids.contains(i)) => on_new += 1,
                Ok(_) => mixed += 1,
            }
        }
    }
    let _ = stop_tx.send(());
    ensure!(errors == 0 && mixed == 0, "{errors} errors, {mixed} mixed responses");
    ensure!(on_old > 0 && on_new > 0, "load did not span the swap ({on_old} old, {on_new} new)");
    Ok(format!(
        "{} responses during a {swap_ms} ms rebuild: {on_old} old-index, {on_new} new-index, 0 errors, 0 mixed",
        on_old + on_new
    ))
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Runtime::new().expect("runtime");
    let criteria: Vec<(&str, Check)> = vec![
        ("Likert percent rows", Box::new(likert_rows)),
        ("round-to-round share deltas", Box::new(share_deltas)),
        ("exact top-k search vs brute force", Box::new(search_exactness)),
        ("norms and index persistence", Box::new(index_persistence)),
        ("chunk reconstruction and span cover", Box::new(chunk_reconstruction)),
        ("retrieval mode contract", Box::new(mode_contract)),
        ("end-to-end ingest, index, serve, query", Box::new(|| rt.block_on(end_to_end()))),
        ("reindex atomicity under load", Box::new(|| rt.block_on(reindex_atomicity()))),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name} ({secs:.2}s): {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({secs:.2}s): {why}", n + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
