use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("corpus not found: {0}")]
    CorpusNotFound(PathBuf),

    #[error("no patches found under {0}")]
    NoPatches(PathBuf),

    #[error("orphan mask: instance {instance_id} references missing patch {patch_id}")]
    OrphanMask {
        instance_id: String,
        patch_id: String,
    },

    #[error("dimension mismatch for {what}: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        what: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("unknown class index {value} in {what}")]
    UnknownClass { what: String, value: u8 },

    #[error("empty instance mask: {0}")]
    EmptyMask(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("segmenter unavailable: {0}")]
    BackendUnavailable(String),

    #[error("segmenter failed for instances {instance_ids:?}: {message}")]
    Backend {
        instance_ids: Vec<String>,
        message: String,
        retryable: bool,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("artifact missing: {0}")]
    ArtifactMissing(PathBuf),

    #[error("infeasible packing: {0}")]
    InfeasiblePacking(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::BackendUnavailable(_) | Error::Backend { .. } => 3,
            Error::ArtifactMissing(_) => 4,
            Error::ContractViolation(_) | Error::NonFinite(_) => 5,
            _ => 2,
        }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Csv { .. } => "csv",
            Error::CorpusNotFound(_) => "corpus_not_found",
            Error::NoPatches(_) => "no_patches",
            Error::OrphanMask { .. } => "orphan_mask",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::UnknownClass { .. } => "unknown_class",
            Error::EmptyMask(_) => "empty_mask",
            Error::Invalid(_) => "invalid",
            Error::BackendUnavailable(_) => "segmenter_unavailable",
            Error::Backend { .. } => "backend",
            Error::ContractViolation(_) => "contract_violation",
            Error::NonFinite(_) => "non_finite",
            Error::ArtifactMissing(_) => "artifact_missing",
            Error::InfeasiblePacking(_) => "infeasible_packing",
            Error::Config(_) => "config",
        }
    }
}
