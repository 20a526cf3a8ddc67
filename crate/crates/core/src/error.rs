use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{column}`")]
    MissingColumn { column: String },

    #[error("non-numeric value {value:?} at line {line}, column `{column}`")]
    NonNumeric {
        line: u64,
        column: String,
        value: String,
    },

    #[error("invalid outcome {value:?} at line {line}, column `{column}` (expected 0/1 or -1/+1)")]
    InvalidOutcome {
        line: u64,
        column: String,
        value: String,
    },

    #[error("non-binary sensitive column `{column}`: found values {values:?}")]
    NonBinaryGroup { column: String, values: Vec<String> },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("feature `{feature}` has zero pooled standard deviation")]
    ZeroVariance { feature: String },

    #[error("attribute `{attribute}` missing or invalid at row {row}")]
    BadAttribute { attribute: String, row: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("updates from mixed rounds: {0:?}")]
    MixedRounds(Vec<usize>),

    #[error("AUROC needs both outcome classes")]
    SingleClass,

    #[error("sensitive group {0} absent from the evaluation set")]
    MissingGroup(u8),

    #[error("degenerate baseline: {0}")]
    DegenerateBaseline(String),

    #[error("gamma = {gamma}: {source}")]
    Gamma {
        gamma: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("model `{model}`: {source}")]
    Model {
        model: String,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_client(self, client: usize) -> Self {
        Error::Client {
            client,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_model(self, model: impl Into<String>) -> Self {
        Error::Model {
            model: model.into(),
            source: Box::new(self),
        }
    }
}
