//! Mean-field Gaussian coordinates `(μ, log σ)` used by the iterative optimisers.

use nalgebra::DVector;

use crate::error::{FedGviError, Result};
use crate::exp_family::NatGaussian;

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    pub mean: DVector<f64>,
    pub log_scale: DVector<f64>,
}

impl VariationalParams {
    pub fn new(mean: DVector<f64>, log_scale: DVector<f64>) -> Result<Self> {
        if mean.len() != log_scale.len() {
            return Err(FedGviError::DimensionMismatch {
                expected: mean.len(),
                found: log_scale.len(),
            });
        }
        Ok(VariationalParams { mean, log_scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn scale(&self) -> DVector<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn variance(&self) -> DVector<f64> {
        self.log_scale.map(|l| (2.0 * l).exp())
    }

    /// Mean-field projection of a proper factor: its mean and marginal scales.
    pub fn from_nat(q: &NatGaussian) -> Result<Self> {
        let m = q.to_moment()?;
        let log_scale = m.covariance.diag().map(|v| 0.5 * v.ln());
        Ok(VariationalParams {
            mean: m.mean,
            log_scale,
        })
    }

    pub fn to_nat(&self) -> Result<NatGaussian> {
        let precision = self.log_scale.map(|l| (-2.0 * l).exp());
        let shift = precision.component_mul(&self.mean);
        NatGaussian::diagonal(precision, shift)
    }

    /// `[μ₁..μ_d, ℓ₁..ℓ_d]`
    pub fn to_flat(&self) -> DVector<f64> {
        let d = self.dim();
        DVector::from_fn(2 * d, |i, _| {
            if i < d {
                self.mean[i]
            } else {
                self.log_scale[i - d]
            }
        })
    }

    pub fn from_flat(x: &DVector<f64>) -> Self {
        let d = x.len() / 2;
        VariationalParams {
            mean: x.rows(0, d).into_owned(),
            log_scale: x.rows(d, d).into_owned(),
        }
    }
}

/// Concatenates mean and log-scale gradient blocks.
pub fn flat_gradient(d_mean: &DVector<f64>, d_log_scale: &DVector<f64>) -> DVector<f64> {
    let d = d_mean.len();
    DVector::from_fn(2 * d, |i, _| {
        if i < d {
            d_mean[i]
        } else {
            d_log_scale[i - d]
        }
    })
}
