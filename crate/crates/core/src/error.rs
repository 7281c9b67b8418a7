use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

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

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("label column `{0}` not found in header")]
    UnknownLabelColumn(String),

    #[error("non-numeric value `{value}` in column `{column}` at data row {row}")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("dataset needs at least 2 classes, found {0}")]
    TooFewClasses(usize),

    #[error("invalid table: {0}")]
    InvalidTable(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged: {0}")]
    NonFiniteLoss(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("run {run} (seed {seed}): {source}")]
    Run {
        run: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Config(_) => "config",
            Error::UnknownLabelColumn(_) => "unknown_label_column",
            Error::NonNumeric { .. } => "non_numeric",
            Error::TooFewClasses(_) => "too_few_classes",
            Error::InvalidTable(_) => "invalid_table",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::InfeasiblePartition(_) => "infeasible_partition",
            Error::Degenerate(_) => "degenerate",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::Protocol(_) => "protocol",
            Error::Run { source, .. } => source.kind(),
        }
    }
}
