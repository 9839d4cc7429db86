//! Federated generalised variational inference over Gaussian factors.

pub mod client;
pub mod divergences;
pub mod engine;
pub mod error;
pub mod exp_family;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod optim;
pub mod oracles;
pub mod server;
pub mod transport;
pub mod variational;
pub mod wire;

pub use error::{FedGviError, Result};
