use std::fmt;
use std::process::ExitCode;

use ragline_core::embed::{BuildError, EmbedError};
use ragline_core::eval::EvalError;
use ragline_core::feedback::StoreError;
use ragline_core::index::IndexError;
use ragline_core::ingest::IngestError;
use ragline_service::{ConfigError, StartupError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Io,
    Backend,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Io => 3,
            Kind::Backend => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Io => "io",
            Kind::Backend => "backend",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(m: impl fmt::Display) -> Self {
        Self { kind: Kind::Usage, message: m.to_string() }
    }

    pub fn io(m: impl fmt::Display) -> Self {
        Self { kind: Kind::Io, message: m.to_string() }
    }

    pub fn backend(m: impl fmt::Display) -> Self {
        Self { kind: Kind::Backend, message: m.to_string() }
    }

    /// Prints the error as one JSON line on stderr and returns the exit code.
    pub fn report(&self) -> ExitCode {
        let line = serde_json::json!({ "error": { "kind": self.kind.as_str(), "message": self.message } });
        eprintln!("{line}");
        ExitCode::from(self.kind.exit_code())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e)
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::InvalidConfig(_) => Self::usage(e),
            _ => Self::io(e),
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        Self::io(e)
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Config(_) => Self::usage(e),
            _ => Self::backend(e),
        }
    }
}

impl From<BuildError> for CliError {
    fn from(e: BuildError) -> Self {
        match e {
            BuildError::BuildFailed { .. } => Self::backend(e),
            BuildError::InvalidBatchSize => Self::usage(e),
            _ => Self::io(e),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        Self::io(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::io(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::io(e),
            _ => Self::usage(e),
        }
    }
}

impl From<StartupError> for CliError {
    fn from(e: StartupError) -> Self {
        match e {
            StartupError::Provider(p) => p.into(),
            other => Self::io(other),
        }
    }
}
