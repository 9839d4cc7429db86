//! Approximate logistic predictive under a Gaussian over augmented weights.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exp_family::MomentGaussian;

/// Blend constant in `σ(μᵀx̃ / √(1 + κ x̃ᵀΣx̃))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kappa {
    #[default]
    Pi,
    /// The usual probit-matching constant `π/8`.
    PiOver8,
}

impl Kappa {
    pub fn value(self) -> f64 {
        match self {
            Kappa::Pi => std::f64::consts::PI,
            Kappa::PiOver8 => std::f64::consts::PI / 8.0,
        }
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn augment(x: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len() + 1, std::iter::once(1.0).chain(x.iter().copied()))
}

/// `p(y = 1 | x)` for features `x` (the leading 1 is added here).
pub fn predict_logit(q: &MomentGaussian, x: &[f64], kappa: Kappa) -> f64 {
    let xt = augment(x);
    let m = q.mean.dot(&xt);
    let v = q.covariance.quad_form(&xt);
    sigmoid(m / (1.0 + kappa.value() * v).sqrt())
}

/// Monte-Carlo predictive `E_q[σ(θᵀx̃)]`.
pub fn predict_logit_mc(q: &MomentGaussian, x: &[f64], seed: u64, n: usize) -> Result<f64> {
    let xt = augment(x);
    let draws = crate::exp_family::NatGaussian::from_moment(q)?.sample(seed, n)?;
    Ok(draws
        .row_iter()
        .map(|r| sigmoid(r.iter().zip(xt.iter()).map(|(a, b)| a * b).sum()))
        .sum::<f64>()
        / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymMat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(mean: [f64; 3], var: [f64; 3]) -> MomentGaussian {
        MomentGaussian::new(
            DVector::from_row_slice(&mean),
            SymMat::diagonal(DVector::from_row_slice(&var)),
        )
        .unwrap()
    }

    #[test]
    fn point_mass_and_orthogonal_limits() {
        let q = diag([0.3, -1.0, 2.0], [1e-300, 1e-300, 1e-300]);
        let x = [0.4, 0.7];
        let exact = sigmoid(0.3 - 0.4 + 1.4);
        assert!((predict_logit(&q, &x, Kappa::Pi) - exact).abs() < 1e-15);
        let q = diag([0.0, 1.0, 2.0], [0.5, 0.5, 0.5]);
        assert_eq!(predict_logit(&q, &[2.0, -1.0], Kappa::Pi), 0.5);
    }

    #[test]
    fn probit_constant_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for k in 0..5 {
            let mean = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let var = [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)];
            let q = diag(mean, var);
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let mc = predict_logit_mc(&q, &x, k, 1_000_000).unwrap();
            let approx = predict_logit(&q, &x, Kappa::PiOver8);
            assert!((mc - approx).abs() < 0.01, "{mc} vs {approx}");
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(0.3) + sigmoid(-0.3) - 1.0).abs() < 1e-16);
    }
}
