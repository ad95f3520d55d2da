use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The observation chain has more than one closed class, or its closed
    /// class is periodic. Classes are listed as triple indices.
    #[error("ergodicity not certified: {reason} (closed classes: {classes:?})")]
    ErgodicityNotCertified { reason: String, classes: Vec<Vec<usize>> },

    #[error("{what} did not converge after {iterations} iterations (final residual {residual:e})")]
    NonConvergence { what: &'static str, iterations: usize, residual: f64, history: Vec<f64> },

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("generation failure: {0}")]
    GenerationFailure(String),

    #[error("ill-conditioned system in {what}: {detail}")]
    IllConditioned { what: &'static str, detail: String },

    #[error("iterate diverged at step {step}")]
    Divergence { step: u64, last_finite: Vec<f64> },

    #[error("replications diverged: {failed:?}")]
    BatchDivergence { failed: Vec<u64> },

    #[error("config error: {0}")]
    Config(String),

    #[error("assumption not certified: {0}")]
    Assumption(String),

    #[error("stage `{stage}` failed (inputs {inputs_hash}): {source}")]
    Stage {
        stage: &'static str,
        inputs_hash: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing input {0}")]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit status: 2 assumption failure, 3 divergence, 4 config error, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Assumption(_) | Error::ErgodicityNotCertified { .. } => 2,
            Error::Divergence { .. } | Error::BatchDivergence { .. } => 3,
            Error::Config(_) => 4,
            _ => 1,
        }
    }
}
