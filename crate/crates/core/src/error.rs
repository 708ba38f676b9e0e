use thiserror::Error;

/// Errors raised by the elicitation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("enumeration cap exceeded: {count} assignments > cap {cap}")]
    CapExceeded { count: u128, cap: u128 },

    #[error("exact solver refuses {nodes} nodes (cap {cap})")]
    SolverCap { nodes: usize, cap: usize },

    #[error("no feasible solution: {0}")]
    Infeasible(String),

    #[error("pool is empty")]
    EmptyPool,

    #[error("pool degenerate: fewer than two candidates with distinct feature vectors")]
    DegeneratePool,

    #[error("relative regret undefined: optimum utility {optimum} is zero but gap is {gap}")]
    DegenerateRegret { optimum: f64, gap: f64 },

    #[error("answer source timed out; query remains pending")]
    AnswerTimeout,

    #[error("stale query id {got} (pending: {pending:?})")]
    StaleQuery { got: u64, pending: Option<u64> },

    #[error("session finished")]
    Finished,

    #[error("unsupported format version {0}")]
    FormatVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
