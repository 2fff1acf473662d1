use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("part {part} is contained in no subset with positive probability")]
    ZeroInclusionProbability { part: usize },
    #[error("subset probabilities sum to {total}, expected 1")]
    ProbabilityMass { total: f64 },
    #[error("bad dimension: {0}")]
    BadDimension(String),
    #[error("invalid problem data: {0}")]
    InvalidProblem(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("time {t} lies outside the horizon [0, {horizon})")]
    OutOfHorizon { t: f64, horizon: f64 },
    #[error("Crank-Nicolson step matrix is singular")]
    SingularStepMatrix,
    #[error("Riccati solution blew up (norm {norm:e})")]
    RiccatiBlowup { norm: f64 },
    #[error("no convergence after {iterations} iterations (last change {change:e})")]
    NoConvergence { iterations: usize, change: f64 },
    #[error("closed loop is not stabilizing (max real eigenvalue {max_real:e})")]
    NotStabilizing { max_real: f64 },
    #[error("line search degenerate: direction curvature {curvature:e}")]
    LineSearchDegenerate { curvature: f64 },
    #[error("reference signal has zero norm")]
    ZeroReference,
    #[error("window {index}: {source}")]
    Window {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("parameter value {value}: {source}")]
    Parameter {
        value: f64,
        #[source]
        source: Box<Error>,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable identifier of the error class, used in CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroInclusionProbability { .. } => "ZeroInclusionProbability",
            Error::ProbabilityMass { .. } => "ProbabilityMassError",
            Error::BadDimension(_) => "BadDimension",
            Error::InvalidProblem(_) => "InvalidProblem",
            Error::GridMismatch(_) => "GridMismatch",
            Error::OutOfHorizon { .. } => "OutOfHorizon",
            Error::SingularStepMatrix => "SingularStepMatrix",
            Error::RiccatiBlowup { .. } => "RiccatiBlowup",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::NotStabilizing { .. } => "NotStabilizing",
            Error::LineSearchDegenerate { .. } => "LineSearchDegenerate",
            Error::ZeroReference => "ZeroReference",
            Error::Window { source, .. } | Error::Parameter { source, .. } => source.code(),
            Error::Config(_) => "ConfigError",
            Error::Parse(_) => "ParseError",
            Error::Io(_) => "IoError",
        }
    }

    /// Process exit status for the error class. Values are part of the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Window { source, .. } | Error::Parameter { source, .. } => source.exit_code(),
            Error::Config(_) => 2,
            Error::GridMismatch(_) => 3,
            Error::BadDimension(_) => 4,
            Error::InvalidProblem(_) => 5,
            Error::ZeroInclusionProbability { .. } => 6,
            Error::ProbabilityMass { .. } => 7,
            Error::OutOfHorizon { .. } => 8,
            Error::SingularStepMatrix => 9,
            Error::RiccatiBlowup { .. } => 10,
            Error::NoConvergence { .. } => 11,
            Error::NotStabilizing { .. } => 12,
            Error::LineSearchDegenerate { .. } => 13,
            Error::ZeroReference => 14,
            Error::Parse(_) => 15,
            Error::Io(_) => 16,
        }
    }

    pub(crate) fn in_window(self, index: usize) -> Self {
        Error::Window { index, source: Box::new(self) }
    }

    /// Tags an error with the sweep value it occurred at.
    pub fn at_parameter(self, value: f64) -> Self {
        Error::Parameter { value, source: Box::new(self) }
    }
}
