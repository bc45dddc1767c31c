use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rank deficiency: column {column} has residual norm {norm:.3e}")]
    RankDeficient { column: usize, norm: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("point violates manifold constraint ({manifold}): defect {defect:.3e}")]
    Constraint { manifold: String, defect: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("integration failure at t = {time}: {reason}")]
    Integration { time: f64, reason: String },

    #[error("step size underflow at t = {time}: h = {step:.3e}")]
    StepUnderflow { time: f64, step: f64 },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Json(_)
            | Error::Contract(_)
            | Error::Domain(_)
            | Error::Unsupported(_) => 2,
            Error::Io(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
