use std::io::Write;
use std::ops::ControlFlow;
use std::path::PathBuf;

use clap::Args;
use ragline_core::generation::ModelProfile;
use ragline_core::pipeline::{prepare_query, PrepareError};
use ragline_core::retrieval::RetrievalParams;
use ragline_core::{generate, Language, ProviderSpec, RetrievalMode};
use ragline_service::state::load_knowledge_base;
use ragline_service::ServiceConfig;

use crate::corpus::{provider_spec, Provider};
use crate::error::{CliError, Result};

/// Selects the scripted mock backend; the value is a `mock://` URL or any
/// other non-empty value for the default mock.
pub const MOCK_BACKEND_ENV: &str = "RAGLINE_MOCK_BACKEND";

#[derive(Debug, Args)]
pub struct AskArgs {
    #[arg(long)]
    question: String,
    /// Index file; defaults to the config's index_path
    #[arg(long)]
    index: Option<PathBuf>,
    /// Chunks file; defaults to the config's chunks_path
    #[arg(long)]
    chunks: Option<PathBuf>,
    /// Service config supplying models, retrieval defaults and the embedder
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    threshold: Option<f32>,
    /// full_chunk or filename_grouped
    #[arg(long)]
    mode: Option<RetrievalMode>,
    #[arg(long)]
    model: Option<String>,
    /// fi, sv or en
    #[arg(long, default_value = "fi")]
    language: Language,
    #[arg(long, value_enum, default_value_t = Provider::Local)]
    provider: Provider,
    #[arg(long, default_value_t = ragline_core::embed::DEFAULT_LOCAL_DIM)]
    dim: usize,
}

fn mock_profile(model: Option<&str>) -> Option<ModelProfile> {
    let value = std::env::var(MOCK_BACKEND_ENV).ok().filter(|v| !v.is_empty())?;
    let url = if value.starts_with(ragline_core::generation::MOCK_SCHEME) {
        value
    } else {
        "mock://cli".to_owned()
    };
    Some(ModelProfile::new(model.unwrap_or("mock"), url))
}

pub async fn run(args: AskArgs) -> Result<()> {
    let config = args.config.as_deref().map(ServiceConfig::load).transpose()?;
    let profile = match (mock_profile(args.model.as_deref()), &config) {
        (Some(p), _) => p,
        (None, Some(cfg)) => {
            let id = args.model.as_deref().unwrap_or(&cfg.default_model);
            cfg.model(id)
                .cloned()
                .ok_or_else(|| CliError::usage(format!("unknown model {id:?}")))?
        }
        (None, None) => {
            return Err(CliError::usage(format!(
                "no model configured: pass --config or set {MOCK_BACKEND_ENV}"
            )))
        }
    };
    let mut params = config.as_ref().map(|c| c.retrieval).unwrap_or_else(RetrievalParams::default);
    params.k = args.k.unwrap_or(params.k);
    params.threshold = args.threshold.unwrap_or(params.threshold);
    params.mode = args.mode.unwrap_or(params.mode);
    if params.k == 0 {
        return Err(CliError::usage("--k must be at least 1"));
    }
    let spec: ProviderSpec = match &config {
        Some(c) => c.embedding.clone(),
        None => provider_spec(args.provider, args.dim),
    };
    let pick = |flag: Option<PathBuf>, from_cfg: Option<PathBuf>, name: &str| {
        flag.or(from_cfg)
            .ok_or_else(|| CliError::usage(format!("--{name} is required without --config")))
    };
    let index_path = pick(args.index, config.as_ref().map(|c| c.index_path.clone()), "index")?;
    let chunks_path = pick(args.chunks, config.as_ref().map(|c| c.chunks_path.clone()), "chunks")?;
    crate::corpus::require_file(&index_path, "index")?;

    let provider = spec.build()?;
    let kb = load_knowledge_base(&index_path, &chunks_path, provider.as_ref())?
        .ok_or_else(|| CliError::io(format!("index {} does not exist", index_path.display())))?;
    let prepared = prepare_query(&kb, provider.as_ref(), &args.question, args.language, &params).map_err(|e| match e {
        PrepareError::Template(e) => CliError::usage(e),
        PrepareError::Retrieval(e) => CliError::backend(e),
    })?;

    let mut out = std::io::stdout().lock();
    if prepared.bundle.hits.is_empty() {
        writeln!(out, "(no sources)")?;
    }
    for (i, h) in prepared.bundle.hits.iter().enumerate() {
        writeln!(out, "[S{}] {} — {} (score {:.4}, {})", i + 1, h.title(), h.source_path(), h.score, h.chunk_id)?;
    }
    writeln!(out)?;
    out.flush()?;
    drop(out);

    let backend = profile.connect().map_err(CliError::usage)?;
    let result = generate(backend.as_ref(), &prepared.prompt, &profile, |t| {
        let mut out = std::io::stdout().lock();
        let ok = out.write_all(t.as_bytes()).and_then(|_| out.flush()).is_ok();
        if ok {
            ControlFlow::Continue(())
        } else {
            ControlFlow::Break(())
        }
    })
    .await;
    println!();
    match result {
        Ok(r) => {
            if r.truncated {
                tracing::warn!(tokens = r.token_events, "answer truncated at the token cap");
            }
            Ok(())
        }
        Err(f) => Err(CliError::backend(f.error)),
    }
}
