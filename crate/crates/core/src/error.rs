use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("fully masked softmax (row {row})")]
    FullyMaskedSoftmax { row: usize },

    #[error("layer norm needs at least 2 features, got {0}")]
    LayerNormWidth(usize),

    #[error("backward already ran on this graph; call zero_grad first")]
    RepeatedBackward,

    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no visible entity in observation (self must always be visible)")]
    NoVisibleEntity,

    #[error("every action is masked")]
    FullyMaskedActions,

    #[error("illegal action for agent {agent}: {action}")]
    IllegalAction { agent: usize, action: String },

    #[error("agent {0} is dead")]
    DeadAgent(usize),

    #[error("non-scalable mixer: built for m={built}, got m={got}")]
    NonScalableMixer { built: usize, got: usize },

    #[error("checkpoint manifest mismatch: missing {missing:?}, extra {extra:?}, reshaped {reshaped:?}")]
    ManifestMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
        reshaped: Vec<String>,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at update {update}: {diagnostic}")]
    NanLoss { update: usize, diagnostic: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
