use thiserror::Error;

/// Errors produced anywhere in the stitching pipeline.
#[derive(Debug, Error)]
pub enum BatsError {
    /// The MDP violates one of its structural invariants.
    #[error("structural error: {0}")]
    Structural(String),

    /// Caller-supplied input is malformed or out of range.
    #[error("input error: {0}")]
    Input(String),

    /// A dataset file failed validation at a specific record.
    #[error("load error at trajectory {trajectory}, record {record}: {message}")]
    Load {
        trajectory: usize,
        record: usize,
        message: String,
    },

    /// A model failed to train (non-finite loss or divergence).
    #[error("training error ({model}): {message}")]
    Training { model: String, message: String },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("harvest produced no trajectories above return threshold {threshold}")]
    EmptyHarvest { threshold: f64 },

    #[error("version mismatch: expected {expected} format version {supported}, found {found}")]
    Version {
        expected: String,
        supported: u32,
        found: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BatsError {
    pub fn training(model: impl Into<String>, message: impl Into<String>) -> Self {
        BatsError::Training {
            model: model.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, BatsError::Training { .. } | BatsError::EmptyHarvest { .. })
    }
}

pub type Result<T, E = BatsError> = std::result::Result<T, E>;
