use std::fmt;

use voxret_core::curation::CurationError;
use voxret_core::features::FeatureError;
use voxret_core::manifest::{ManifestError, VectorStoreError};
use voxret_core::model::ModelError;
use voxret_core::retrieval::RetrievalError;
use voxret_core::training::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Validation,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Kind::Usage, "usage", message)
    }

    pub fn validation(category: &'static str, message: impl Into<String>) -> Self {
        Self::new(Kind::Validation, category, message)
    }

    pub fn runtime(category: &'static str, message: impl Into<String>) -> Self {
        Self::new(Kind::Runtime, category, message)
    }

    fn new(kind: Kind, category: &'static str, message: impl Into<String>) -> Self {
        // Keep the report on one line.
        let message = message.into().replace('\n', " ");
        Self {
            kind,
            category,
            message,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Usage => 2,
            Kind::Validation => 3,
            Kind::Runtime => 1,
        }
    }

    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category, self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime("io", e.to_string())
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Io(io) => io.into(),
            other => Self::validation("manifest", other.to_string()),
        }
    }
}

impl From<VectorStoreError> for CliError {
    fn from(e: VectorStoreError) -> Self {
        match e {
            VectorStoreError::Io(io) => io.into(),
            other => Self::validation("vectors", other.to_string()),
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Wav(hound::Error::IoError(io)) => io.into(),
            FeatureError::Wav(other) => Self::validation("wav", other.to_string()),
            other => Self::validation("features", other.to_string()),
        }
    }
}

impl From<CurationError> for CliError {
    fn from(e: CurationError) -> Self {
        Self::validation("curation", e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(io) => io.into(),
            other => Self::validation("model", other.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Model(m) => m.into(),
            RetrievalError::Manifest(m) => m.into(),
            other => Self::validation("retrieval", other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Manifest(m) => m.into(),
            TrainError::Retrieval(r) => r.into(),
            e @ (TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient(_)) => {
                Self::runtime("train", e.to_string())
            }
            TrainError::Callback(msg) => Self::runtime("io", msg),
            other => Self::validation("train", other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::validation("input", e.to_string())
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        Self::validation("config", e.to_string())
    }
}
