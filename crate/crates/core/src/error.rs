use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value iteration did not converge: residual {residual:e} after {iterations} sweeps")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("malformed graph: {0}")]
    MalformedGraph(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mixture component {component} emptied repeatedly")]
    EmptyComponent { component: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("success-trajectory collection timed out: {successes} successes in {attempts} attempts")]
    CollectionTimeout { successes: usize, attempts: usize },
    #[error("skill {skill} produced degenerate labels ({positives} positive, {negatives} negative)")]
    DegenerateLabels {
        skill: usize,
        positives: usize,
        negatives: usize,
    },
    #[error("rewards contain non-finite values")]
    NonFiniteRewards,
    #[error("reward oracle failed at theta {theta:?}: {reason}")]
    OracleFailure { theta: Vec<f64>, reason: String },
    #[error("skill dataset is empty")]
    EmptyDataset,
    #[error("queue holds {0} values, need at least 2")]
    InsufficientHistory(usize),
    #[error("probability {0} outside (0, 1)")]
    InvalidProbability(f64),
    #[error("degrees of freedom must be positive, got {0}")]
    InvalidDf(f64),
    #[error("invalid recovery parameters: {0}")]
    InvalidTheta(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
