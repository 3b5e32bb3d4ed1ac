use std::fmt;

use thiserror::Error;

/// A single problem found while validating a network description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Location inside the document, e.g. `stages[1].k`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("channel index out of bounds: {index} >= {channels}")]
    ChannelIndexOutOfBounds { index: usize, channels: usize },

    #[error("indices must be strictly increasing")]
    IndicesNotIncreasing,

    #[error("kernel larger than padded input")]
    KernelTooLarge,

    #[error("divisibility violated: {0}")]
    Divisibility(String),

    #[error("batch too small for batch statistics")]
    BatchTooSmall,

    #[error("softmax over an empty axis")]
    EmptyAxis,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate importance vector")]
    DegenerateImportance,

    #[error("k exceeds cardinality (k={k}, cardinality={cardinality})")]
    KOutOfRange { k: usize, cardinality: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("missing forward cache: {0}")]
    MissingCache(&'static str),

    #[error("invalid configuration:\n{}", format_violations(.0))]
    Config(Vec<Violation>),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("invalid tensor dump: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
