use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("non-numeric cell at row {row}, column {column:?}: {value:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("missing value at row {row}, column {column:?}")]
    MissingValue { row: usize, column: String },

    #[error("{split} split has {rows} rows, fewer than the {required} needed for one window")]
    SplitTooShort {
        split: &'static str,
        rows: usize,
        required: usize,
    },

    #[error("series has {rows} rows, fewer than input+horizon = {required}")]
    NotEnoughRows { rows: usize, required: usize },

    #[error("few-shot fraction {fraction} of {windows} windows selects nothing")]
    EmptyFewShot { fraction: f64, windows: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("freeze policy: {0}")]
    Policy(String),

    #[error("failed to load {what}: {message}")]
    Load { what: String, message: String },

    #[error("description file: {0}")]
    Description(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: total={total}, plm={plm:?}, ts={ts}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        total: f64,
        plm: Option<f64>,
        ts: f64,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable discriminator used in CLI error records and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedRow { .. } | Error::NonNumericCell { .. } | Error::MissingValue { .. } => {
                "ingest"
            }
            Error::SplitTooShort { .. } | Error::NotEnoughRows { .. } | Error::EmptyFewShot { .. } => {
                "dataset"
            }
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Policy(_) => "policy",
            Error::Load { .. } => "load",
            Error::Description(_) => "description",
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => "numeric",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
