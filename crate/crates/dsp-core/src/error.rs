//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid discount scheme: {0}")]
    InvalidScheme(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid generator config: {0}")]
    InvalidConfig(String),

    #[error("invalid solver budget: {0}")]
    InvalidBudget(String),

    #[error(
        "degenerate normalization: baseline emissions do not exceed the naive bound \
         (flat intensity or unresponsive elasticity leaves no shifting signal)"
    )]
    DegenerateNormalization,

    #[error("customer {customer} has zero altered consumption; relative savings undefined")]
    ZeroAlteredConsumption { customer: usize },

    #[error("value {value} is not a member of the discount grid")]
    NotInZ { value: f64 },

    #[error("bit vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("{n_vars} variables exceed the exhaustive solver limit of {max_vars}")]
    TooLarge { n_vars: usize, max_vars: usize },

    #[error("mutable consumption is zero at timestep {timestep}")]
    ZeroMutableConsumption { timestep: usize },

    #[error("chunk {chunk} has zero mutable consumption at timestep {timestep}")]
    ZeroChunkMutableConsumption { chunk: usize, timestep: usize },

    #[error("chunk size {chunk_size} does not divide {n_customers} customers evenly")]
    IndivisibleChunkSize { n_customers: usize, chunk_size: usize },

    #[error("chunk targets exceed the grid bound after {iterations} redistribution iterations")]
    TargetBoundsInfeasible { iterations: usize },

    #[error("sub-solver failed on chunk {chunk}: {source}")]
    SubSolverFailure {
        chunk: usize,
        #[source]
        source: Box<DspError>,
    },

    #[error("degenerate metric reference: {0}")]
    DegenerateReference(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;
