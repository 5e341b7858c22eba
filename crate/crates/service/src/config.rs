//! Service configuration file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ragline_core::generation::ModelProfile;
use ragline_core::retrieval::RetrievalParams;
use ragline_core::{Language, ProviderSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_bind() -> String {
    DEFAULT_BIND.to_owned()
}

fn default_languages() -> Vec<Language> {
    vec![Language::Fi, Language::Sv, Language::En]
}

fn default_batch() -> usize {
    DEFAULT_EMBED_BATCH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    pub index_path: PathBuf,
    /// Chunks file (JSON Lines) whose ids the index refers to.
    pub chunks_path: PathBuf,
    pub store_path: PathBuf,
    /// The first entry is the language used when a query names none.
    #[serde(default = "default_languages")]
    pub ui_languages: Vec<Language>,
    pub default_model: String,
    pub models: Vec<ModelProfile>,
    #[serde(default)]
    pub retrieval: RetrievalParams,
    #[serde(default)]
    pub embedding: ProviderSpec,
    #[serde(default = "default_batch")]
    pub embed_batch_size: usize,
}

impl ServiceConfig {
    /// Reads a TOML config; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_owned(),
                message,
            },
            other => other,
        })?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        for p in [&mut self.index_path, &mut self.chunks_path, &mut self.store_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.models.is_empty() {
            return invalid("model registry is empty".into());
        }
        let mut ids = HashSet::new();
        for m in &self.models {
            if !ids.insert(m.model_id.as_str()) {
                return invalid(format!("duplicate model id {:?}", m.model_id));
            }
            m.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if !ids.contains(self.default_model.as_str()) {
            return invalid(format!("default model {:?} is not in the registry", self.default_model));
        }
        if self.retrieval.k < 1 {
            return invalid("retrieval.k must be at least 1".into());
        }
        if !self.retrieval.threshold.is_finite() {
            return invalid("retrieval.threshold must be finite".into());
        }
        if self.ui_languages.is_empty() || self.ui_languages.contains(&Language::Unknown) {
            return invalid("ui_languages must list fi, sv or en".into());
        }
        if self.embed_batch_size == 0 {
            return invalid("embed_batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn model(&self, model_id: &str) -> Option<&ModelProfile> {
        self.models.iter().find(|m| m.model_id == model_id)
    }

    pub fn default_language(&self) -> Language {
        self.ui_languages[0]
    }
}
