use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Evidence attached when a position scan runs out of positions.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ScanEvidence {
    pub component: usize,
    pub neuron: usize,
    pub hits_found: u64,
    pub hits_needed: u64,
    pub positions_scanned: u64,
    pub last_position: u64,
    pub tolerance: f64,
    /// Smallest row distance found over the scanned positions (the last 2^20 at
    /// most), using each position's nearest token; a measured covering radius of
    /// the reachable rows around the target row.
    pub best_distance: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid `{field}`: {reason}")]
    InvalidArgument { field: String, reason: String },

    #[error("matrix `{name}` is ill-conditioned (condition number {cond:.3e})")]
    IllConditioned { name: String, cond: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("no Kronecker witness for beta = {beta} with q <= {q_cap} at epsilon = {epsilon}")]
    KroneckerCap { beta: f64, epsilon: f64, q_cap: u64 },

    #[error(
        "position scan exhausted for component {} neuron {}: {} of {} hits after {} positions",
        .0.component, .0.neuron, .0.hits_found, .0.hits_needed, .0.positions_scanned
    )]
    ScanExhausted(Box<ScanEvidence>),

    #[error("{stage} budget exceeded: achieved {achieved:.6e} > budget {budget:.6e}")]
    Budget {
        stage: String,
        achieved: f64,
        budget: f64,
    },
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
