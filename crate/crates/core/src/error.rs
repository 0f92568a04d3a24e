use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate vector: norm {norm:e} at row {row}")]
    DegenerateVector { row: usize, norm: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("no image embedding for sample id {0}")]
    MissingEmbedding(u64),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("file truncated: need {needed} bytes, have {actual}")]
    Truncated { needed: usize, actual: usize },

    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("invalid header: {0}")]
    Header(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short tag, used by the CLI for machine-parsable failure lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Shape(_) => "shape",
            Error::Parameter(_) => "parameter",
            Error::Domain(_) => "domain",
            Error::DegenerateVector { .. } => "degenerate_vector",
            Error::Contract(_) => "contract",
            Error::Template(_) => "template",
            Error::MissingEmbedding(_) => "missing_embedding",
            Error::Capacity(_) => "capacity",
            Error::Config(_) => "config",
            Error::UnknownKeys(_) => "unknown_keys",
            Error::Divergence { .. } => "divergence",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::CrcMismatch { .. } => "crc_mismatch",
            Error::Header(_) => "header",
            Error::Validation(_) => "validation",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
