//! Evaluation reports over stored ratings and latencies.
//!
//! Percentages are integers rounded half away from zero, computed per rating
//! row without renormalization, so a column may sum to 99 or 101. Shares of
//! rating groups are rounded from the summed counts, never from rounded rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feedback::{ExportRecord, InteractionRecord};

pub const RATINGS: [u8; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no ratings to evaluate")]
    EmptyEvaluation,
    #[error("rating {0} is outside 1..=5")]
    Validation(i64),
}

/// `100 * part / total` rounded half away from zero (both non-negative).
pub fn percent_half_away(part: u64, total: u64) -> u32 {
    assert!(total > 0, "total must be positive");
    ((200 * part + total) / (2 * total)) as u32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikertReport {
    pub label: String,
    pub counts: BTreeMap<u8, u64>,
    pub total: u64,
    pub percents: BTreeMap<u8, u32>,
    /// Ratings 1 and 2.
    pub low_share_percent: u32,
    /// Rating 3.
    pub mid_share_percent: u32,
    /// Rating 5.
    pub top_share_percent: u32,
}

impl LikertReport {
    /// Builds a report from per-rating counts for ratings 1..=5.
    pub fn from_counts(label: impl Into<String>, counts: [u64; 5]) -> Result<Self, EvalError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(EvalError::EmptyEvaluation);
        }
        let counts: BTreeMap<u8, u64> = RATINGS.iter().copied().zip(counts).collect();
        let share = |ratings: &[u8]| percent_half_away(ratings.iter().map(|r| counts[r]).sum(), total);
        Ok(Self {
            label: label.into(),
            percents: counts.iter().map(|(&r, &c)| (r, percent_half_away(c, total))).collect(),
            low_share_percent: share(&[1, 2]),
            mid_share_percent: share(&[3]),
            top_share_percent: share(&[5]),
            counts,
            total,
        })
    }

    pub fn count(&self, rating: u8) -> u64 {
        self.counts.get(&rating).copied().unwrap_or(0)
    }

    pub fn percent(&self, rating: u8) -> u32 {
        self.percents.get(&rating).copied().unwrap_or(0)
    }

    pub fn percent_sum(&self) -> u32 {
        self.percents.values().sum()
    }
}

/// Tallies ratings into a report.
pub fn likert_report(label: impl Into<String>, ratings: &[i64]) -> Result<LikertReport, EvalError> {
    if ratings.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let mut counts = [0u64; 5];
    for &r in ratings {
        if !(1..=5).contains(&r) {
            return Err(EvalError::Validation(r));
        }
        counts[(r - 1) as usize] += 1;
    }
    LikertReport::from_counts(label, counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareChange {
    pub from: u32,
    pub to: u32,
    pub delta: i64,
}

impl ShareChange {
    fn new(from: u32, to: u32) -> Self {
        Self {
            from,
            to,
            delta: i64::from(to) - i64::from(from),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundComparison {
    pub from_label: String,
    pub to_label: String,
    pub low_share: ShareChange,
    pub mid_share: ShareChange,
    pub top_share: ShareChange,
    pub per_rating: BTreeMap<u8, ShareChange>,
}

pub fn compare_rounds(a: &LikertReport, b: &LikertReport) -> RoundComparison {
    RoundComparison {
        from_label: a.label.clone(),
        to_label: b.label.clone(),
        low_share: ShareChange::new(a.low_share_percent, b.low_share_percent),
        mid_share: ShareChange::new(a.mid_share_percent, b.mid_share_percent),
        top_share: ShareChange::new(a.top_share_percent, b.top_share_percent),
        per_rating: RATINGS
            .iter()
            .map(|&r| (r, ShareChange::new(a.percent(r), b.percent(r))))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean_ms: f64,
    /// Middle value; for even `n` the midpoint of the two middle values.
    pub median_ms: f64,
    /// Nearest-rank 95th percentile.
    pub p95_ms: f64,
}

pub fn latency_stats_from(latencies_ms: &[u64]) -> Result<LatencyStats, EvalError> {
    if latencies_ms.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let mut v = latencies_ms.to_vec();
    v.sort_unstable();
    let n = v.len();
    let mean_ms = v.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let median_ms = if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    };
    // smallest rank r with r >= 0.95 n, computed exactly in integers
    let rank = (95 * n).div_ceil(100).max(1);
    Ok(LatencyStats {
        n,
        mean_ms,
        median_ms,
        p95_ms: v[rank - 1] as f64,
    })
}

pub fn latency_stats(records: &[InteractionRecord]) -> Result<LatencyStats, EvalError> {
    let latencies: Vec<u64> = records.iter().map(|r| r.latency_ms).collect();
    latency_stats_from(&latencies)
}

/// Rated records, optionally restricted to one model.
pub fn ratings_of(records: &[ExportRecord], model_id: Option<&str>) -> Vec<i64> {
    records
        .iter()
        .filter(|r| model_id.is_none_or(|m| r.interaction.model_id == m))
        .filter_map(|r| r.rating.map(i64::from))
        .collect()
}

/// Plain-text table with a Responses and % column pair per report.
pub fn render_table(reports: &[LikertReport]) -> String {
    let col = |r: &LikertReport| r.label.chars().count().max(15);
    let mut out = String::new();
    let _ = write!(out, "{:<6}", "");
    for r in reports {
        let _ = write!(out, " | {:^w$}", r.label, w = col(r));
    }
    out.push('\n');
    let _ = write!(out, "{:<6}", "Rating");
    for r in reports {
        let w = col(r);
        let _ = write!(out, " | {:>9} {:>w2$}", "Responses", "%", w2 = w - 10);
    }
    out.push('\n');
    let rule_len = out.lines().last().map(|l| l.chars().count()).unwrap_or(0);
    out.push_str(&"-".repeat(rule_len));
    out.push('\n');
    for rating in RATINGS {
        let _ = write!(out, "{rating:<6}");
        for r in reports {
            let w = col(r);
            let pct = format!("{}%", r.percent(rating));
            let _ = write!(out, " | {:>9} {:>w2$}", r.count(rating), pct, w2 = w - 10);
        }
        out.push('\n');
    }
    out.push_str(&"-".repeat(rule_len));
    out.push('\n');
    let _ = write!(out, "{:<6}", "Total");
    for r in reports {
        let w = col(r);
        let pct = format!("{}%", r.percent_sum());
        let _ = write!(out, " | {:>9} {:>w2$}", r.total, pct, w2 = w - 10);
    }
    out.push('\n');
    for (name, get) in [
        ("Low (1-2)", (|r: &LikertReport| r.low_share_percent) as fn(&LikertReport) -> u32),
        ("Mid (3)", |r| r.mid_share_percent),
        ("Top (5)", |r| r.top_share_percent),
    ] {
        let _ = write!(out, "{name:<10}");
        for r in reports {
            let _ = write!(out, " {:>w$}", format!("{}%", get(r)), w = col(r) + 2);
        }
        out.push('\n');
    }
    out
}
