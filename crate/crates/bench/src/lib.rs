//! Deterministic inputs shared by the benchmarks.

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ragline_core::{EmbeddingVector, IndexEntry, Language, SourceDocument, VectorIndex};

const WORDS: &[&str] = &[
    "kalkitus", "maaperä", "pH", "nurmi", "sato", "rotation", "drainage", "lime", "soil", "åker", "växtföljd",
];

pub fn document(chars: usize, seed: u64) -> SourceDocument {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(chars + 16);
    while text.chars().count() < chars {
        text.push_str(WORDS[rng.random_range(0..WORDS.len())]);
        text.push_str(if rng.random_ratio(1, 9) { ". " } else { " " });
    }
    SourceDocument {
        doc_id: "bench".into(),
        title: "Bench".into(),
        language: Language::Fi,
        text: text.chars().take(chars).collect(),
        source_path: "bench.txt".into(),
        ingested_at: chrono_epoch(),
    }
}

fn chrono_epoch() -> DateTime<Utc> {
    DateTime::UNIX_EPOCH
}

pub fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    loop {
        let raw: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        if let Ok(v) = ragline_core::normalize(&raw) {
            return v;
        }
    }
}

pub fn index(n: usize, dim: usize, seed: u64) -> VectorIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|i| IndexEntry {
            chunk_id: format!("doc{}#{}", i / 8, i % 8),
            vector: unit_vector(&mut rng, dim),
        })
        .collect();
    VectorIndex::new(dim, "bench", entries, chrono_epoch()).expect("valid index")
}

pub fn ratings(n: usize, seed: u64) -> Vec<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(1..=5)).collect()
}
