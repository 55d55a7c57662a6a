use thiserror::Error;

/// Errors raised by margin evaluation, reachability and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at state {state:?}: {what}")]
    NonFinite { what: &'static str, state: Vec<f64> },

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("all {0} samples were rejected (non-finite or outside the region)")]
    AllSamplesRejected(usize),

    #[error("time-step too large for Δ₀ bound: 1 - (l_f + l_g u_max) T = {denominator}")]
    TimeStepTooLarge { denominator: f64 },

    #[error("reach ball fixed point did not contract (delta {previous} -> {next})")]
    NotContracting { previous: f64, next: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("missing global constants for {0}")]
    MissingGlobals(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn non_finite(what: &'static str, x: &crate::Vector) -> Error {
    Error::NonFinite {
        what,
        state: x.iter().copied().collect(),
    }
}
