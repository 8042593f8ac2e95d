use thiserror::Error;

pub type Result<T> = std::result::Result<T, UfmError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UfmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("descent diverged at iteration {iter} (loss = {loss})")]
    Diverged { iter: usize, loss: f64 },
}

impl UfmError {
    pub(crate) fn shape(what: &'static str, expected: (usize, usize), got: (usize, usize)) -> Self {
        UfmError::DimensionMismatch {
            what,
            expected: format!("{}x{}", expected.0, expected.1),
            got: format!("{}x{}", got.0, got.1),
        }
    }

    /// Whether the error stems from the numerics rather than from bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, UfmError::Diverged { .. } | UfmError::NonFinite(_))
    }
}
