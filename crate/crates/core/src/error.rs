use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AfnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AfnError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid grammar: {0}")]
    Grammar(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("parse error at record {record}: {reason}")]
    Parse { record: usize, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{0}")]
    Invalid(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AfnError {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        AfnError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        AfnError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AfnError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by non-finite numbers or broken tensor shapes.
    pub fn is_numeric(&self) -> bool {
        matches!(self, AfnError::NonFinite { .. } | AfnError::Dimension { .. })
    }
}
