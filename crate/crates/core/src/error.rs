use thiserror::Error;

/// Failure classes shared by every module.
///
/// The command runner maps each variant onto a process exit code, so new
/// variants must be assigned a class in [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("structural error: {0}")]
    Structural(String),

    #[error("history ends at step {available} but evaluation needs time {requested}")]
    HistoryTooShort { available: usize, requested: f64 },

    #[error("budget exceeded: {what} needs {required} but the budget is {budget}")]
    Budget {
        what: &'static str,
        required: u128,
        budget: u128,
    },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("singular implicit matrix at level {level}, node {node}")]
    Singular { level: usize, node: usize },

    #[error("fixed point did not converge at level {level}, node {node} after {iterations} iterations")]
    FixedPoint {
        level: usize,
        node: usize,
        iterations: usize,
    },

    #[error("rank-deficient regression at step {step}")]
    RankDeficient { step: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("iteration did not converge: {0}")]
    NonConvergent(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("evaluation error at {start}..{end}: {message}")]
    Eval { start: usize, end: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("tolerance check failed: {0}")]
    Tolerance(String),

    #[error("degenerate mollifier kernel: {0}")]
    DegenerateKernel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure classes used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Parse,
    Validation,
    Budget,
    Numeric,
    Tolerance,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Parse => 2,
            ErrorClass::Validation => 3,
            ErrorClass::Budget => 4,
            ErrorClass::Numeric => 5,
            ErrorClass::Tolerance => 6,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parse { .. } | Error::Io(_) => ErrorClass::Parse,
            Error::Structural(_) | Error::Validation(_) | Error::Precondition(_) => ErrorClass::Validation,
            Error::Budget { .. } => ErrorClass::Budget,
            Error::Tolerance(_) => ErrorClass::Tolerance,
            Error::HistoryTooShort { .. }
            | Error::LengthMismatch { .. }
            | Error::Singular { .. }
            | Error::FixedPoint { .. }
            | Error::RankDeficient { .. }
            | Error::NonConvergent(_)
            | Error::Eval { .. }
            | Error::DegenerateKernel(_) => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
