use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("graph is disconnected: components {0:?}")]
    DisconnectedGraph(Vec<Vec<usize>>),

    #[error("invalid graph edge ({0}, {1}): {2}")]
    InvalidEdge(usize, usize, &'static str),

    #[error("graph must have at least 2 agents, got {0}")]
    TooFewAgents(usize),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("eigensolver did not converge after {0} sweeps")]
    EigenNoConvergence(usize),

    #[error("sliding-mode order {0} unsupported (max {1})")]
    UnsupportedOrder(usize, usize),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("degenerate full-communication baseline: mse {0} below floor")]
    DegenerateBaseline(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("guarantee violated: {0}")]
    GuaranteeViolation(String),

    #[error("weight file error: {0}")]
    WeightFormat(String),

    #[error("csv error: {0}")]
    CsvFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
