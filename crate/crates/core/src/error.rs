use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("condition level {0} has no observations")]
    MissingLevel(usize),

    #[error("condition label {label} at observation {index} is outside 1..={k}")]
    BadLabel {
        index: usize,
        label: usize,
        k: usize,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("component {0} has a zero eigenvalue and cannot be scored")]
    RankDeficient(usize),

    #[error("bad component count: {0}")]
    BadComponentCount(String),

    #[error("rotation needs at least two components, got {0}")]
    NothingToRotate(usize),

    #[error("transform is not orthogonal (max deviation {0:e})")]
    NotOrthogonal(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no positive scale maps one loading vector onto the other")]
    NoMatch,

    #[error("degenerate vector: {0}")]
    DegenerateVector(&'static str),

    #[error("between-condition loading column {0} is zero")]
    NoBetweenEffect(usize),

    #[error("unknown preset `{0}`")]
    BadPreset(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("eigen solver did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotSymmetric(_)
            | Error::NotPsd(_)
            | Error::RankDeficient(_)
            | Error::NotOrthogonal(_)
            | Error::NoMatch
            | Error::DegenerateVector(_)
            | Error::NoBetweenEffect(_)
            | Error::NoConvergence(_) => 3,
            _ => 2,
        }
    }
}
