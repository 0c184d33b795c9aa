use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("joint support has {size} outcomes, above the cap of {cap}")]
    CapExceeded { size: u128, cap: usize },

    #[error("coordinate {index} is {value}, above its maximum {bound}")]
    NotInRegion { index: usize, value: f64, bound: f64 },

    #[error("solver stalled after {iterations} iterations (residual {residual:e})")]
    SolverStall { iterations: usize, residual: f64 },

    #[error("center is degenerate: E[u_{index}] - x_{index} - r = {gap}")]
    DegenerateCenter { index: usize, gap: f64 },

    #[error("coupling direction has too few nonzero entries")]
    ZeroDirection,

    #[error("margin chain violated: {0}")]
    MarginViolated(String),

    #[error("ball not inside the full-information region (slack {slack:e} along {witness:?})")]
    NotInUstar { witness: Vec<f64>, slack: f64 },

    #[error("promise state {state:?} lies outside the mechanism region")]
    StateOutsideRegion { state: Vec<f64> },

    #[error("schedule infeasible at step {step}: {reason}")]
    ScheduleInfeasible { step: usize, reason: String },

    #[error("partition covers {size} agents, above the subset enumeration bound 16")]
    PartitionTooLarge { size: usize },

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("deviation grid has {size} maps, above the limit {limit}")]
    GridTooLarge { size: u128, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
