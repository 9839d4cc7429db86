use thiserror::Error;

use crate::wire::WireError;

pub type Result<T> = std::result::Result<T, FedGviError>;

#[derive(Debug, Error)]
pub enum FedGviError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("precision matrix is not positive definite")]
    NotPositiveDefinite,

    /// The blended precision `αΛ_q + (1-α)Λ_p` of an Alpha-Rényi divergence
    /// is not positive definite, so the Gaussian closed form does not exist.
    #[error("alpha-Rényi blended precision is not positive definite (alpha = {alpha})")]
    AlphaBlendNotPositiveDefinite { alpha: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("optimiser did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("client {client_id}: cavity is improper and repair is disabled or exhausted")]
    ImproperCavity { client_id: u32 },

    #[error("server posterior is improper; clients with indefinite deltas this round: {clients:?}")]
    ImproperPosterior { clients: Vec<u32> },

    #[error("round mismatch: expected {expected}, found {found}")]
    RoundMismatch { expected: u64, found: u64 },

    #[error("duplicate update from client {0}")]
    DuplicateClient(u32),

    #[error("client {client_id} timed out")]
    Timeout { client_id: u32 },

    #[error("round aborted: {0}")]
    Aborted(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("grid too narrow: boundary mass {boundary_mass:e}")]
    GridTooNarrow { boundary_mass: f64 },

    #[error("grid mismatch")]
    GridMismatch,

    #[error("pooling weights must be non-negative and sum to one (sum = {sum})")]
    InvalidPoolWeights { sum: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Wire(#[from] WireError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
