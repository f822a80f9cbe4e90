use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("non-finite {what} at t = {t}, x = {x:?}")]
    NonFiniteCoefficient { what: &'static str, t: f64, x: Vec<f64> },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("newton iteration failed for particle {particle}: residual {residual:e}")]
    NewtonNonConvergence { particle: usize, residual: f64 },

    #[error("scheme mismatch: {0}")]
    SchemeMismatch(String),

    #[error("particle id {id} out of range (N = {n})")]
    ParticleOutOfRange { id: usize, n: usize },

    #[error("trajectory has no recorded history")]
    MissingHistory,

    #[error("no data to plot")]
    EmptyData,

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
