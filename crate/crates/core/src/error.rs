use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("normal equations remain singular after ridge escalation (final ridge {ridge:e})")]
    Singular { ridge: f64 },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid prune config: {0}")]
    InvalidPruneConfig(String),

    #[error("token id {token} out of range for vocab of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("sequence of {len} tokens exceeds max context {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("layer {0} out of range")]
    LayerOutOfRange(usize),

    #[error("kv head {head} in layer {layer} is not live")]
    HeadNotLive { layer: usize, head: usize },

    #[error("invalid FFN keep set for layer {layer}: {reason}")]
    InvalidKeep { layer: usize, reason: String },

    #[error("head mask does not match model: {0}")]
    MaskMismatch(String),

    #[error("bad magic bytes (expected PUTR)")]
    BadMagic,

    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated model file: {0}")]
    Truncated(String),

    #[error("inconsistent model header: {0}")]
    Header(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("no sequences to evaluate")]
    NoSequences,

    #[error("every target token is padding")]
    NoTargets,

    #[error(
        "target sparsity {target} is infeasible; max achievable is {max_achievable:.6}"
    )]
    Infeasible { target: f64, max_achievable: f64 },

    #[error("budget of {budget} kv heads exceeds {live} live heads")]
    HeadBudget { budget: usize, live: usize },

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
