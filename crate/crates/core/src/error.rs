use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss is not a scalar (numel {numel})")]
    NotScalar { numel: usize },

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing parameter `{name}`")]
    MissingParameter { name: String },

    #[error("incompatible shape for `{name}`: source {src:?}, destination {dst:?}")]
    IncompatibleShape {
        name: String,
        src: Vec<usize>,
        dst: Vec<usize>,
    },

    #[error("transfer plan does not match store: {0}")]
    PlanMismatch(String),

    #[error("non-finite gradient for `{name}`")]
    NonFiniteGradient { name: String },

    #[error("missing gradient for trainable parameter `{name}`")]
    MissingGradient { name: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("step {step} beyond schedule total {total}")]
    StepOutOfRange { step: u64, total: u64 },

    #[error("loss must be positive, got {0}")]
    NonPositiveLoss(f64),

    #[error("non-positive step size delta at index {index}")]
    NonPositiveDelta { index: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("corpus has {have} training tokens, need at least {need}")]
    CorpusTooSmall { have: usize, need: usize },

    #[error("bad magic: expected \"XATL\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("format version mismatch: file {found}, reader {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated record `{name}`")]
    TruncatedRecord { name: String },

    #[error("duplicate tensor name `{name}`")]
    DuplicateName { name: String },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("dtype mismatch for `{name}`: expected {expected}, found {found}")]
    DtypeMismatch {
        name: String,
        expected: &'static str,
        found: &'static str,
    },

    #[error("bad checkpoint metadata: {0}")]
    BadMetadata(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
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

    /// True for failures caused by bad inputs (configs, files, shapes) as
    /// opposed to failures that happen while a valid run is executing.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteGradient { .. }
                | Error::NonFiniteLoss { .. }
                | Error::GraphConsumed
        )
    }
}
