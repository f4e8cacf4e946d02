use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
///
/// `is_config` separates user-facing configuration problems from failures
/// that happen while computing; the command line maps them to distinct
/// exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("unsupported bit depth in {path}: {detail}")]
    UnsupportedBitDepth { path: PathBuf, detail: String },
    #[error("mask {path} holds non-integer pixel values ({detail})")]
    NonIntegerMask { path: PathBuf, detail: String },
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("timestep error: {0}")]
    Timestep(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("missing attention cache entry (timestep {timestep}, layer {layer}, role {role})")]
    CacheMiss {
        timestep: usize,
        layer: String,
        role: String,
    },
    #[error("no cells detected: {0}")]
    NoCells(String),
    #[error("alpha undefined for pair: {0}")]
    AlphaUndefined(String),
    #[error("no ground-truth instances: {0}")]
    NoGroundTruth(String),
    #[error("detector failure: {0}")]
    Detector(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// True for errors caused by bad inputs or settings rather than by a
    /// failing computation.
    pub fn is_config(&self) -> bool {
        match self {
            Error::MissingFile(_)
            | Error::Decode { .. }
            | Error::UnsupportedBitDepth { .. }
            | Error::NonIntegerMask { .. }
            | Error::InvalidArgument(_)
            | Error::EmptyDataset(_)
            | Error::Checkpoint(_)
            | Error::Manifest(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
