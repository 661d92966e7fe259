use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sign class id {0}")]
    InvalidClass(usize),
    #[error("pose places the sign outside the scene: {0}")]
    PoseOutOfBounds(String),
    #[error("singular transform (|det| = {det:e})")]
    SingularTransform { det: f64 },
    #[error("gradient shape mismatch: expected {expected:?}, got {got:?}")]
    GradientShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("input shape mismatch: expected {expected:?}, got {got:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("attack diverged at step {step} (loss {loss})")]
    AttackDiverged { step: usize, loss: f64 },
    #[error("mislabel target class must differ from the victim class ({0})")]
    InvalidTarget(usize),
    #[error("patch was optimized on detector {0}; transfer evaluation needs a different detector")]
    NotATransfer(String),
    #[error("reports are not comparable: {0}")]
    IncompatibleReports(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed artifact: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
