use thiserror::Error;

/// Errors raised by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("unknown noise schedule profile `{0}`")]
    UnknownProfile(String),

    #[error("posterior has zero mass at position {position} (u_t={token_t}, u_0={token_0}, t={step})")]
    ImpossiblePosterior {
        position: usize,
        token_t: u32,
        token_0: u32,
        step: usize,
    },

    #[error("guidance left row {row} with no probability mass")]
    DegenerateGuidance { row: usize },

    #[error("mask token present at position {position}")]
    MaskToken { position: usize },

    #[error("missing text-encoder layer {0}")]
    MissingLayer(usize),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(format: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            format,
            detail: detail.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::Numerical(_)
                | Error::DegenerateGuidance { .. }
                | Error::ImpossiblePosterior { .. }
                | Error::MaskToken { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
