use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("probability {0} outside the open interval (0,1)")]
    ProbabilityOutOfRange(f64),

    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("state {state} is not strictly below the barrier {barrier}")]
    AboveBarrier { state: f64, barrier: f64 },

    #[error("one-step survival probability vanished (path mass entirely above the barrier)")]
    DegenerateSurvival,

    #[error("non-finite tangent for component `{component}` at step {step}")]
    NonFiniteTangent { component: String, step: usize },

    #[error("unknown sensitivity component `{0}`")]
    UnknownComponent(String),

    #[error("reached maximum level {0} without meeting the weak-error target")]
    MaxLevelExceeded(usize),

    #[error("closed form {closed_form} disagrees with check estimate {estimate} (std error {std_error})")]
    OracleMismatch { closed_form: f64, estimate: f64, std_error: f64 },

    #[error("insufficient precision: {0}")]
    InsufficientPrecision(String),
}

impl Error {
    pub fn invalid(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
