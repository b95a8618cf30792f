use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid graph input: {0}")]
    InvalidGraph(String),

    #[error("graph has neither spatial nor temporal edges")]
    NoEdges,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("malformed dataset: {0}")]
    Dataset(String),

    #[error("malformed model file: {0}")]
    Model(String),

    #[error("non-finite loss on scene {scene_id}")]
    NonFiniteLoss { scene_id: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> CoreError {
    CoreError::DimensionMismatch {
        op,
        detail: detail.into(),
    }
}
