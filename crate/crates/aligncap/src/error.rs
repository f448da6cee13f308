use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op} expects a scalar, got shape {shape}")]
    NotScalar {
        op: &'static str,
        shape: String,
    },
    #[error("empty dimension in {0}")]
    EmptyDimension(&'static str),
    #[error("invalid probability {0}: dropout requires 0 <= p < 1")]
    InvalidProbability(f64),
    #[error("row index {index} out of range for table with {rows} rows")]
    RowIndexOutOfRange { index: usize, rows: usize },
    #[error("invalid bounding box [{x0}, {y0}, {x1}, {y1}]: {reason}")]
    InvalidBBox {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        reason: &'static str,
    },
    #[error("{0}")]
    Precondition(String),
    #[error("non-finite loss component {component} ({value}); training diverged")]
    NonFinite {
        component: &'static str,
        value: f64,
    },
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
