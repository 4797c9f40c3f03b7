use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
}

impl ConfigError {
    pub fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid { field: field.to_string(), reason: reason.into() }
    }

    /// Name of the offending field, when there is one.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("i/o error on weight file: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    Version(u32),
    #[error("weight file truncated: {0}")]
    Truncated(&'static str),
    #[error("layer {layer} shape mismatch: file has {found:?}, expected {expected:?}")]
    ShapeMismatch { layer: usize, found: (usize, usize), expected: (usize, usize) },
    #[error("architecture mismatch: file has {found:?}, expected {expected:?}")]
    Architecture { found: Vec<usize>, expected: Vec<usize> },
    #[error("config fingerprint mismatch: file has {found}, expected {expected}")]
    Fingerprint { found: String, expected: String },
    #[error("non-finite parameter in weight file")]
    NonFinite,
    #[error("{0} trailing bytes after weight data")]
    Trailing(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("simplex iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),
}
