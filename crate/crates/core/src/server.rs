//! Server side of a federated round: aggregation of client updates and the
//! server GVI step.

use std::collections::BTreeSet;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::client::SiteFactor;
use crate::divergences::{divergence, divergence_grad, expected_quadratic, DivergenceSpec};
use crate::error::{FedGviError, Result};
use crate::exp_family::{MomentGaussian, NatGaussian};
use crate::linalg::SymMat;
use crate::optim::{minimize, OptimSettings};
use crate::variational::{flat_gradient, VariationalParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub divergence: DivergenceSpec,
    /// Convergence threshold on the largest update sup-norm.
    pub tolerance: f64,
    pub optimiser: OptimSettings,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            divergence: DivergenceSpec::Kl,
            tolerance: 1e-8,
            optimiser: OptimSettings::default(),
        }
    }
}

/// A client's contribution to one round.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub round: u64,
    pub delta: SiteFactor,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundTelemetry {
    pub round: u64,
    pub clients: usize,
    pub max_update_norm: f64,
    pub posterior_mean: Vec<f64>,
    pub posterior_sd: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub prior: NatGaussian,
    pub server_loss: SiteFactor,
    pub posterior: NatGaussian,
    pub round: u64,
    pub config: ServerConfig,
    pub history: Vec<RoundTelemetry>,
}

impl ServerState {
    pub fn new(prior: NatGaussian, config: ServerConfig) -> Result<Self> {
        if !prior.is_proper() {
            return Err(FedGviError::NotPositiveDefinite);
        }
        config.divergence.validate()?;
        let server_loss = SiteFactor::zero(prior.dim(), prior.is_diagonal());
        Ok(ServerState {
            posterior: prior.clone(),
            prior,
            server_loss,
            round: 0,
            config,
            history: Vec::new(),
        })
    }

    /// Adds the round's updates to the server loss. Clients without an update
    /// contribute nothing.
    pub fn aggregate(&self, updates: &[ClientUpdate]) -> Result<ServerState> {
        let expected = self.round + 1;
        let mut seen = BTreeSet::new();
        let mut loss = self.server_loss.clone();
        for u in updates {
            if u.round != expected {
                return Err(FedGviError::RoundMismatch {
                    expected,
                    found: u.round,
                });
            }
            if !seen.insert(u.client_id) {
                return Err(FedGviError::DuplicateClient(u.client_id));
            }
            loss = loss.add(&u.delta)?;
        }
        loss.round_updated = expected;
        Ok(ServerState {
            server_loss: loss,
            round: expected,
            ..self.clone()
        })
    }

    /// `argmin_q E_q[λ_s] + D_s(q : π)`.
    pub fn server_optimize(&self) -> Result<NatGaussian> {
        server_optimize(&self.prior, &self.server_loss, &self.config, &self.posterior)
    }

    /// Aggregates and optimises. On failure the state is left untouched and
    /// the error names the clients whose deltas were indefinite.
    pub fn step(&self, updates: &[ClientUpdate]) -> Result<ServerState> {
        let mut next = self.aggregate(updates)?;
        let posterior = match next.server_optimize() {
            Ok(q) => q,
            Err(FedGviError::NotPositiveDefinite) => {
                let clients = updates
                    .iter()
                    .filter(|u| u.delta.delta_precision.min_eigenvalue() < 0.0)
                    .map(|u| u.client_id)
                    .collect();
                return Err(FedGviError::ImproperPosterior { clients });
            }
            Err(e) => return Err(e),
        };
        for u in updates {
            log::debug!("round {} client {} update norm {:.3e}", next.round, u.client_id, u.delta.sup_norm());
        }
        let m = posterior.to_moment()?;
        next.history.push(RoundTelemetry {
            round: next.round,
            clients: updates.len(),
            max_update_norm: max_update_norm(updates),
            posterior_mean: m.mean.iter().copied().collect(),
            posterior_sd: m.std_devs().iter().copied().collect(),
        });
        next.posterior = posterior;
        Ok(next)
    }
}

fn max_update_norm(updates: &[ClientUpdate]) -> f64 {
    updates
        .iter()
        .map(|u| u.delta.sup_norm())
        .fold(0.0, f64::max)
}

/// True iff every update's natural-parameter sup-norm is below `tolerance`.
pub fn check_convergence(updates: &[ClientUpdate], tolerance: f64) -> bool {
    max_update_norm(updates) < tolerance
}

pub fn server_optimize(
    prior: &NatGaussian,
    loss: &SiteFactor,
    config: &ServerConfig,
    warm_start: &NatGaussian,
) -> Result<NatGaussian> {
    if let Some(w) = config.divergence.kl_weight() {
        let q = prior.multiply(&loss.scale(w).as_factor())?;
        if !q.is_proper() {
            return Err(FedGviError::NotPositiveDefinite);
        }
        return Ok(q);
    }
    let start = VariationalParams::from_nat(warm_start)?;
    let div = config.divergence;
    let objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let vp = VariationalParams::from_flat(x);
        let var = vp.variance();
        let m = MomentGaussian::new(vp.mean.clone(), SymMat::diagonal(var.clone()))?;
        let e = expected_quadratic(&m, &loss.delta_precision, &loss.delta_shift);
        let a_diag = loss.delta_precision.diag();
        let g_mean = loss.delta_precision.mul_vec(&vp.mean) - &loss.delta_shift;
        let g_log = a_diag.component_mul(&var);
        let q = vp.to_nat()?;
        let d = divergence(&div, &q, prior)?;
        let gd = divergence_grad(&div, &vp, prior)?;
        Ok((e + d, flat_gradient(&g_mean, &g_log) + gd))
    };
    let res = minimize(objective, start.to_flat(), &config.optimiser)?;
    VariationalParams::from_flat(&res.x).to_nat()
}

/// Normalised logarithmic opinion pool `∏ q_m^{τ_m}`.
pub fn pooled_posterior(posteriors: &[NatGaussian], weights: &[f64]) -> Result<NatGaussian> {
    if posteriors.is_empty() || posteriors.len() != weights.len() {
        return Err(FedGviError::DimensionMismatch {
            expected: posteriors.len(),
            found: weights.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w < 0.0) {
        return Err(FedGviError::InvalidPoolWeights { sum });
    }
    let mut pooled = posteriors[0].power(weights[0]);
    for (q, &w) in posteriors.iter().zip(weights).skip(1) {
        pooled = pooled.multiply(&q.power(w))?;
    }
    Ok(pooled.with_log_offset(0.0))
}
