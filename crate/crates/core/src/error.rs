use thiserror::Error;

/// Errors produced by the personalization toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("dtype mismatch in {op}")]
    DType { op: &'static str },

    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("loss must be a scalar node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown memory phase `{0}`")]
    UnknownPhase(String),

    #[error("unknown parameter group `{name}`; valid groups: {valid}")]
    UnknownGroup { name: String, valid: String },

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("label {label} out of range for vocabulary of size {vocab}")]
    LabelOutOfRange { label: usize, vocab: usize },

    #[error("invalid lattice: {0}")]
    Lattice(String),

    #[error("instance too large for path enumeration: T+U = {0} exceeds 12")]
    TooLarge(usize),

    #[error("invalid cache config: {0}")]
    CacheConfig(String),

    #[error("window never fills: {total} examples available, window size {window}")]
    WindowNeverFills { total: usize, window: usize },

    #[error("invalid split plan: {0}")]
    SplitPlan(String),

    #[error("group `{0}` does not freeze an encoder prefix")]
    NoFrozenPrefix(String),

    #[error("WER is undefined for an empty reference")]
    EmptyReference,

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("ledgers are not comparable: {0}")]
    LedgerMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
