use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: output size ({extent} + 2*{pad} - {kernel}) is not divisible by stride {stride}")]
    NonIntegralOutput {
        op: &'static str,
        extent: usize,
        pad: usize,
        kernel: usize,
        stride: usize,
    },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape is not topologically ordered: node {node} ({name}) reads value {input} produced later")]
    Cycle {
        node: usize,
        name: String,
        input: usize,
    },

    #[error("backward of `{name}` returned {got} gradients for {expected} inputs")]
    BackwardArity {
        name: String,
        expected: usize,
        got: usize,
    },

    #[error("stale scale: stored alpha {stored} but latent weights give {current}; refresh before backward")]
    StaleAlpha { stored: f64, current: f64 },

    #[error("entry {index} = {value} is not ternary")]
    NotTernary { index: usize, value: i64 },

    #[error("config error at `{key}`{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config {
        key: String,
        line: Option<usize>,
        message: String,
    },

    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("{what}: bad magic, expected {expected}, found {found}")]
    BadMagic {
        what: String,
        expected: String,
        found: String,
    },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("export refused: layer {layer} deviates by {deviation:e} (tolerance {tolerance:e})")]
    Equivalence {
        layer: String,
        deviation: f64,
        tolerance: f64,
    },

    #[error("nothing to fuse: model has no quantized layers (mode {0})")]
    NothingToFuse(String),

    #[error("I/O error on {path}: {source}")]
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
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
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
