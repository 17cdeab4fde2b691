use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("unsupported request: {0}")]
    Unsupported(String),

    #[error("unknown built-in example `{0}`")]
    UnknownExample(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("correlation matrix is not positive semi-definite")]
    NotPositiveSemiDefinite,

    #[error("no sign change in bracket [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },

    #[error("predicate is false at the upper search bound {0}")]
    SearchExhausted(u64),

    #[error("information matrix is singular (is every treatment administered?)")]
    SingularInformation,

    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),

    #[error("estimator precondition failed: {0}")]
    Estimator(String),

    #[error("analysis impossible: {0}")]
    Analysis(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
