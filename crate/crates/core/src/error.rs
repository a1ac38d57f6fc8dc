use thiserror::Error;

/// Errors raised by the filtering, interval, LP and shielding routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// The observation has (numerically) zero probability under the belief and kernel.
    #[error("zero evidence: observation {observation} has mass {mass:e} after action {action}")]
    ZeroEvidence {
        action: usize,
        observation: usize,
        mass: f64,
    },

    /// No admissible kernel and prior in the envelope can produce the observation.
    #[error("inconsistent observation {observation} after action {action} (max evidence {max_evidence:e})")]
    InconsistentObservation {
        action: usize,
        observation: usize,
        max_evidence: f64,
    },

    #[error("invalid counts: {0}")]
    InvalidCounts(String),

    #[error("invalid alpha budget: {0}")]
    InvalidBudget(String),

    /// The simplex pivoting exceeded its iteration cap or lost feasibility.
    #[error("LP numerical failure: {0}")]
    NumericalFailure(String),

    #[error("malformed linear program: {0}")]
    MalformedProgram(String),

    #[error("no shieldable region at gamma = {gamma}")]
    EmptyCore { gamma: f64 },

    #[error("support exploration exceeded the cap of {cap} supports")]
    SupportExplosion { cap: usize },

    #[error("infeasible interval row: sum(lower) = {lower_sum}, sum(upper) = {upper_sum}")]
    InfeasibleRow { lower_sum: f64, upper_sum: f64 },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("model validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("benchmark spec error: {0}")]
    Spec(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
