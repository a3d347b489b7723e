use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpeError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("not a permutation of 0..{n}: {detail}")]
    InvalidPermutation { n: usize, detail: String },

    #[error("matrix is not square: {rows} rows, row {row} has {cols} entries")]
    NotSquare { rows: usize, row: usize, cols: usize },

    #[error("matrix is not doubly stochastic: {0}")]
    NotDoublyStochastic(String),

    #[error("no perfect matching on the support graph with {residual:.3e} residual mass left")]
    MatchingFailure { residual: f64 },

    #[error("decomposition is empty")]
    EmptyDecomposition,

    #[error("invalid probability {0}, expected a value in (0, 1]")]
    InvalidProbability(f64),

    #[error("invalid rule set: {0}")]
    InvalidRuleSet(String),

    #[error("pinned item {item} does not exist in a ranking of length {n}")]
    UnknownItem { item: usize, n: usize },

    #[error("rule {0:?} is not part of the rule set")]
    NotASubset(String),

    #[error("exact correction requires deterministic rules, found probability {0}")]
    StochasticRules(f64),

    #[error("{count} rules exceed the power-set limit of {limit}; use the Monte Carlo correction")]
    TooManyRules { count: usize, limit: usize },

    #[error("sample count must be at least 1")]
    ZeroSamples,

    #[error("position {position} out of range 1..={n}")]
    PositionOutOfRange { position: usize, n: usize },

    #[error("full-support violation: item {item} has zero propensity at position {position}")]
    FullSupportViolation { item: usize, position: usize },

    #[error("no observations")]
    EmptyLogs,

    #[error("unresolved reference {0:?}")]
    UnresolvedRef(String),

    #[error("position {0} has no usable impressions, bias curve is unidentifiable there")]
    Unidentifiable(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = OpeError> = std::result::Result<T, E>;
