use thiserror::Error;

use crate::analytics::AnalyticsError;
use crate::corpus::CorpusError;
use crate::paradigms::ParadigmError;
use crate::sampler::SamplerError;
use crate::scorer::BridgeError;
use crate::taxonomy::TaxonomyError;

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Protocol,
    Analysis,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Paradigm(#[from] ParadigmError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            // keep the innermost stage name
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Stage { source, .. } => source.category(),
            Error::Bridge(_) | Error::Corpus(CorpusError::Vocabulary(_)) => ErrorCategory::Protocol,
            Error::Corpus(_) | Error::Config(_) | Error::Io { .. } => ErrorCategory::Config,
            Error::Sampler(_) | Error::Taxonomy(_) | Error::Paradigm(_) | Error::Analytics(_) => {
                ErrorCategory::Analysis
            }
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
