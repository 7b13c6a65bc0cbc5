use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("rank {rank} outside the valid range {min}..={max}")]
    Rank { rank: usize, min: usize, max: usize },

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid elite selection: {0}")]
    Selection(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("search space of {size} subsets exceeds the limit of {limit}")]
    SearchSpace { size: u128, limit: u128 },

    #[error("infeasible budget: {0}")]
    Budget(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("no configuration reaches ratio {target}; nearest achievable ratios: {nearest:?}")]
    Infeasible { target: f64, nearest: Vec<String> },
}

impl Error {
    /// True for failures of the numerical kernels, as opposed to bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NoConvergence { .. })
    }
}
