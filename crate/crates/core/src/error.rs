use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid augmentation parameters: {0}")]
    Augmentation(String),

    #[error("record {record}: {detail}")]
    Record { record: String, detail: String },

    #[error("missing fold assignment for record {0}")]
    MissingFold(String),

    #[error("wfdb header line {line}: {detail}")]
    Header { line: usize, detail: String },

    #[error("unsupported wfdb signal format {0} (only format 16 is supported)")]
    UnsupportedFormat(u32),

    #[error("signal data: {0}")]
    SignalData(String),

    #[error("invalid sample (sentinel -32768) at sample {sample}, signal {signal}")]
    InvalidSample { sample: usize, signal: usize },

    #[error("metadata row {row}: {detail}")]
    Metadata { row: usize, detail: String },

    #[error("zero-norm embedding: {0}")]
    ZeroNorm(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("encoder flatten size is {computed}, expected {expected}")]
    FlattenSize { computed: usize, expected: usize },

    #[error("frozen component {0} was modified during training")]
    FrozenModified(String),

    #[error("model component {0} is not present")]
    UnknownComponent(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
