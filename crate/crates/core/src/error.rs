use thiserror::Error;

/// Errors raised by schedules, oracles, policies and analysis routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("timestep {t} out of range 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("kind mismatch: {0}")]
    KindMismatch(String),

    #[error("tau {0} outside (0, 1]")]
    TauOutOfRange(f64),

    #[error("trace has no real-inference record for timestep {0}")]
    MissingTimestep(usize),

    #[error("approximation window k must be positive")]
    KZero,

    #[error("burst position s={s} outside 1..={k}")]
    StepOutOfRange { s: usize, k: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("trace record at timestep {0} carries no snapshot")]
    MissingSnapshot(usize),

    #[error("ledger incomplete: {0}")]
    IncompleteLedger(String),

    #[error("latent carries no grid shape")]
    ShapeMissing,

    #[error("grid shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),

    #[error("traces are not comparable: {0}")]
    ConfigMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value produced: {0}")]
    NonFinite(&'static str),

    #[error("unknown condition id {0}")]
    UnknownCondition(usize),

    #[error("i/o: {0}")]
    Io(String),

    #[error("parse: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
