use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: norm {norm:e} is at or below {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("gradient check aborted: {0}")]
    CheckAborted(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("schedule exhausted: step {step} exceeds total {total}")]
    ScheduleExhausted { step: usize, total: usize },

    #[error("undefined divisor: {0}")]
    UndefinedDivisor(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("missing class {0}")]
    MissingClass(usize),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("snapshot format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures rooted in arithmetic (as opposed to bad input or IO).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::DegenerateVector { .. }
                | Error::SingularSystem(_)
                | Error::NonFinite { .. }
                | Error::CheckAborted(_)
                | Error::UndefinedDivisor(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
