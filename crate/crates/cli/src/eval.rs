use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use ragline_core::eval::{latency_stats_from, render_table, EvalError};
use ragline_core::{compare_rounds, likert_report, FeedbackStore, LatencyStats, LikertReport};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Rating distribution of one evaluation round
    Report(ReportArgs),
    /// Share changes between two saved reports
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Feedback store (SQLite) or JSON Lines export with a `rating` per line
    #[arg(long)]
    from: PathBuf,
    /// Label of the round, e.g. "April 2025"
    #[arg(long)]
    round: String,
    /// Only count interactions answered by this model
    #[arg(long)]
    model: Option<String>,
    /// Also write the JSON report to this file
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub likert: LikertReport,
    pub unrated: usize,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub latency: Option<LatencyStats>,
}

#[derive(Debug, Default)]
struct Row {
    rating: Option<i64>,
    model_id: Option<String>,
    latency_ms: Option<u64>,
}

const SQLITE_MAGIC: &[u8] = b"SQLite format 3\0";

fn is_sqlite(path: &Path) -> Result<bool> {
    let mut head = [0u8; 16];
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let n = f.read(&mut head)?;
    Ok(n == head.len() && head == SQLITE_MAGIC)
}

fn load_rows(path: &Path) -> Result<Vec<Row>> {
    if is_sqlite(path)? {
        let store = FeedbackStore::open(path)?;
        return Ok(store
            .export_all()?
            .into_iter()
            .map(|r| Row {
                rating: r.rating.map(i64::from),
                model_id: Some(r.interaction.model_id),
                latency_ms: Some(r.interaction.latency_ms),
            })
            .collect());
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line)
            .map_err(|e| CliError::io(format!("{} line {}: {e}", path.display(), n + 1)))?;
        let bad = |what: &str| CliError::io(format!("{} line {}: {what}", path.display(), n + 1));
        let rating = match v.get("rating") {
            None | Some(Value::Null) => None,
            Some(r) => Some(r.as_i64().ok_or_else(|| bad("rating is not an integer"))?),
        };
        rows.push(Row {
            rating,
            model_id: v.get("model_id").and_then(Value::as_str).map(str::to_owned),
            latency_ms: v.get("latency_ms").and_then(Value::as_u64),
        });
    }
    Ok(rows)
}

pub fn build_report(from: &Path, round: &str, model: Option<&str>) -> Result<EvalReport> {
    let rows: Vec<Row> = load_rows(from)?
        .into_iter()
        .filter(|r| model.is_none_or(|m| r.model_id.as_deref() == Some(m)))
        .collect();
    let ratings: Vec<i64> = rows.iter().filter_map(|r| r.rating).collect();
    let likert = likert_report(round, &ratings).map_err(|e| match e {
        EvalError::EmptyEvaluation => CliError::io(format!("{}: no rated interactions", from.display())),
        other => CliError::io(format!("{}: {other}", from.display())),
    })?;
    let latencies: Vec<u64> = rows.iter().filter_map(|r| r.latency_ms).collect();
    Ok(EvalReport {
        likert,
        unrated: rows.len() - ratings.len(),
        model_id: model.map(str::to_owned),
        latency: latency_stats_from(&latencies).ok(),
    })
}

fn read_report(path: &Path) -> Result<LikertReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| CliError::io(format!("{}: not a report: {e}", path.display()));
    let v: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    match v.get("likert") {
        Some(l) => serde_json::from_value(l.clone()).map_err(bad),
        None => serde_json::from_value(v).map_err(bad),
    }
}

pub fn run(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Report(args) => {
            let report = build_report(&args.from, &args.round, args.model.as_deref())?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(path) = &args.json {
                std::fs::write(path, format!("{json}\n")).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
            }
            println!("{json}");
            println!();
            print!("{}", render_table(std::slice::from_ref(&report.likert)));
            Ok(())
        }
        EvalCommand::Compare(args) => {
            let a = read_report(&args.a)?;
            let b = read_report(&args.b)?;
            let cmp = compare_rounds(&a, &b);
            println!("{}", serde_json::to_string_pretty(&cmp).expect("comparison serializes"));
            println!();
            print!("{}", render_table(&[a, b]));
            for (name, c) in [("low (1-2)", cmp.low_share), ("mid (3)", cmp.mid_share), ("top (5)", cmp.top_share)] {
                println!("{name}: {}% -> {}% ({:+})", c.from, c.to, c.delta);
            }
            Ok(())
        }
    }
}
