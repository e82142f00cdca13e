//! Crate-wide error type.

use thiserror::Error;

/// Errors shared by all modules.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("matrix is singular or ill-conditioned (condition estimate {cond:.3e})")]
    IllConditioned { cond: f64 },
    #[error("tape error: {0}")]
    Tape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("sampler mode {mode} is incompatible with variant {variant}")]
    IncompatibleSamplerMode { mode: String, variant: String },
    #[error("environment error: {0}")]
    Env(String),
    #[error("expert could not fill the trajectory quota: {0}")]
    QuotaExceeded(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
