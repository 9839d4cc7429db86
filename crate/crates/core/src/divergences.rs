//! Closed-form divergences between Gaussian factors and their gradients in
//! mean-field `(μ, log σ)` coordinates.
//!
//! The Alpha-Rényi divergence uses the prefactor `1/(α(α−1))` with the
//! expectation taken under the second argument,
//! `D_AR(q:p) = 1/(α(α−1)) log ∫ q^α p^{1−α}`, which is non-negative for every
//! admissible `α`. For Gaussians the integral reduces to log-partition
//! functions of the blended natural parameters.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{FedGviError, Result};
use crate::exp_family::{MomentGaussian, NatGaussian};
use crate::linalg::SymMat;
use crate::variational::{flat_gradient, VariationalParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivergenceSpec {
    Kl,
    WeightedKl { w: f64 },
    ReverseKl,
    AlphaRenyi { alpha: f64 },
    FisherRao,
}

impl DivergenceSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DivergenceSpec::WeightedKl { w } if !(w > 0.0 && w.is_finite()) => Err(
                FedGviError::InvalidParameter(format!("weighted KL requires w > 0, got {w}")),
            ),
            DivergenceSpec::AlphaRenyi { alpha }
                if !alpha.is_finite() || alpha == 0.0 || alpha == 1.0 =>
            {
                Err(FedGviError::InvalidParameter(format!(
                    "alpha-Rényi requires alpha not in {{0, 1}}, got {alpha}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// The weight `w` such that the divergence is `KL / w`, for the KL family.
    pub fn kl_weight(&self) -> Option<f64> {
        match *self {
            DivergenceSpec::Kl => Some(1.0),
            DivergenceSpec::WeightedKl { w } => Some(w),
            _ => None,
        }
    }
}

fn check_pair(q: &NatGaussian, p: &NatGaussian) -> Result<()> {
    if q.dim() != p.dim() {
        return Err(FedGviError::DimensionMismatch {
            expected: q.dim(),
            found: p.dim(),
        });
    }
    if !q.is_proper() || !p.is_proper() {
        return Err(FedGviError::NotPositiveDefinite);
    }
    Ok(())
}

/// `KL(q‖p)` for proper Gaussians.
fn kl(q: &NatGaussian, p: &NatGaussian) -> Result<f64> {
    let mq = q.to_moment()?;
    let mp = p.to_moment()?;
    let diff = &mp.mean - &mq.mean;
    let d = q.dim() as f64;
    let value = 0.5
        * (p.precision().trace_product(&mq.covariance) + p.precision().quad_form(&diff) - d
            + q.precision().log_det()?
            - p.precision().log_det()?);
    Ok(value.max(0.0))
}

fn alpha_blend(q: &NatGaussian, p: &NatGaussian, alpha: f64) -> Result<NatGaussian> {
    let blend = q.power(alpha).multiply(&p.power(1.0 - alpha))?;
    if !blend.is_proper() {
        return Err(FedGviError::AlphaBlendNotPositiveDefinite { alpha });
    }
    Ok(blend)
}

fn alpha_renyi(q: &NatGaussian, p: &NatGaussian, alpha: f64) -> Result<f64> {
    let blend = alpha_blend(q, p, alpha)?;
    let log_integral =
        blend.log_partition()? - alpha * q.log_partition()? - (1.0 - alpha) * p.log_partition()?;
    Ok((log_integral / (alpha * (alpha - 1.0))).max(0.0))
}

pub fn divergence(spec: &DivergenceSpec, q: &NatGaussian, p: &NatGaussian) -> Result<f64> {
    spec.validate()?;
    check_pair(q, p)?;
    match *spec {
        DivergenceSpec::Kl => kl(q, p),
        DivergenceSpec::WeightedKl { w } => Ok(kl(q, p)? / w),
        DivergenceSpec::ReverseKl => kl(p, q),
        DivergenceSpec::AlphaRenyi { alpha } => alpha_renyi(q, p, alpha),
        DivergenceSpec::FisherRao => {
            if q.dim() != 1 {
                return Err(FedGviError::Unsupported(
                    "Fisher-Rao distance is only available for univariate Gaussians".into(),
                ));
            }
            fisher_rao_1d(&q.to_moment()?, &p.to_moment()?)
        }
    }
}

/// Fisher–Rao geodesic distance between two univariate Gaussians.
///
/// With `u = μ/√2` the Fisher metric is `√2` times the Poincaré half-plane
/// metric in `(u, σ)`, giving `√2 log((1+Δ)/(1−Δ))` with
/// `Δ² = ((u₁−u₂)² + (σ₁−σ₂)²) / ((u₁−u₂)² + (σ₁+σ₂)²)`.
pub fn fisher_rao_1d(q: &MomentGaussian, p: &MomentGaussian) -> Result<f64> {
    if q.dim() != 1 || p.dim() != 1 {
        return Err(FedGviError::Unsupported(
            "Fisher-Rao distance is only available for univariate Gaussians".into(),
        ));
    }
    let (mu1, s1) = (q.mean[0], q.covariance.get(0, 0).sqrt());
    let (mu2, s2) = (p.mean[0], p.covariance.get(0, 0).sqrt());
    let du2 = 0.5 * (mu1 - mu2).powi(2);
    let num = du2 + (s1 - s2).powi(2);
    if num == 0.0 {
        return Ok(0.0);
    }
    let delta = (num / (du2 + (s1 + s2).powi(2))).sqrt();
    Ok(std::f64::consts::SQRT_2 * 2.0 * delta.atanh())
}

/// Gradient of `divergence(spec, q, p)` with respect to `(μ, log σ)` of the
/// mean-field `q`, returned as `[∂μ.., ∂log σ..]`.
pub fn divergence_grad(
    spec: &DivergenceSpec,
    q: &VariationalParams,
    p: &NatGaussian,
) -> Result<DVector<f64>> {
    spec.validate()?;
    if q.dim() != p.dim() {
        return Err(FedGviError::DimensionMismatch {
            expected: q.dim(),
            found: p.dim(),
        });
    }
    if !p.is_proper() {
        return Err(FedGviError::NotPositiveDefinite);
    }
    match *spec {
        DivergenceSpec::Kl => kl_grad(q, p),
        DivergenceSpec::WeightedKl { w } => Ok(kl_grad(q, p)? / w),
        DivergenceSpec::ReverseKl => reverse_kl_grad(q, p),
        DivergenceSpec::AlphaRenyi { alpha } => alpha_renyi_grad(q, p, alpha),
        DivergenceSpec::FisherRao => fisher_rao_grad(q, p),
    }
}

fn kl_grad(q: &VariationalParams, p: &NatGaussian) -> Result<DVector<f64>> {
    let mu_p = p.mean()?;
    let var = q.variance();
    let d_mean = p.precision().mul_vec(&(&q.mean - &mu_p));
    let lam_diag = p.precision().diag();
    let d_log = DVector::from_fn(q.dim(), |j, _| lam_diag[j] * var[j] - 1.0);
    Ok(flat_gradient(&d_mean, &d_log))
}

fn reverse_kl_grad(q: &VariationalParams, p: &NatGaussian) -> Result<DVector<f64>> {
    let mp = p.to_moment()?;
    let var = q.variance();
    let diff = &q.mean - &mp.mean;
    let d_mean = diff.component_div(&var);
    let cov_diag = mp.covariance.diag();
    let d_log = DVector::from_fn(q.dim(), |j, _| {
        1.0 - (cov_diag[j] + diff[j] * diff[j]) / var[j]
    });
    Ok(flat_gradient(&d_mean, &d_log))
}

fn alpha_renyi_grad(q: &VariationalParams, p: &NatGaussian, alpha: f64) -> Result<DVector<f64>> {
    let qn = q.to_nat()?;
    let blend = alpha_blend(&qn, p, alpha)?.to_moment()?;
    let var = q.variance();
    let d = q.dim();
    // gradients with respect to the natural parameters (η_q, diag Λ_q)
    let g_eta = (&blend.mean - &q.mean) / (alpha - 1.0);
    let g_lam = DVector::from_fn(d, |j, _| {
        (-0.5 * (blend.mean[j].powi(2) + blend.covariance.get(j, j))
            + 0.5 * (q.mean[j].powi(2) + var[j]))
            / (alpha - 1.0)
    });
    let lam_q = var.map(|v| 1.0 / v);
    let d_mean = lam_q.component_mul(&g_eta);
    let d_log = DVector::from_fn(d, |j, _| -2.0 * lam_q[j] * (g_lam[j] + q.mean[j] * g_eta[j]));
    Ok(flat_gradient(&d_mean, &d_log))
}

fn fisher_rao_grad(q: &VariationalParams, p: &NatGaussian) -> Result<DVector<f64>> {
    if q.dim() != 1 {
        return Err(FedGviError::Unsupported(
            "Fisher-Rao distance is only available for univariate Gaussians".into(),
        ));
    }
    let mp = p.to_moment()?;
    let (mu1, s1) = (q.mean[0], q.log_scale[0].exp());
    let (mu2, s2) = (mp.mean[0], mp.covariance.get(0, 0).sqrt());
    let n = 0.5 * (mu1 - mu2).powi(2) + (s1 - s2).powi(2);
    if n == 0.0 {
        return Ok(DVector::zeros(2));
    }
    let z = 1.0 + n / (2.0 * s1 * s2);
    let dd_dz = std::f64::consts::SQRT_2 / ((z - 1.0) * (z + 1.0)).sqrt();
    let dz_dmu = (mu1 - mu2) / (2.0 * s1 * s2);
    let dz_ds = (s1 - s2) / (s1 * s2) - n / (2.0 * s1 * s1 * s2);
    Ok(DVector::from_vec(vec![dd_dz * dz_dmu, dd_dz * dz_ds * s1]))
}

/// Gaussian closed form of `E_q[½θᵀAθ − bᵀθ]` for a quadratic `(A, b)`.
pub fn expected_quadratic(q: &MomentGaussian, a: &SymMat, b: &DVector<f64>) -> f64 {
    0.5 * (a.quad_form(&q.mean) + a.trace_product(&q.covariance)) - b.dot(&q.mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uni(m: f64, v: f64) -> NatGaussian {
        NatGaussian::univariate(m, v).unwrap()
    }

    /// Quadrature oracle for `∫ f(θ) dθ` over a wide window (trapezoid rule).
    fn trapz(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / (n - 1) as f64;
        let mut s = 0.5 * (f(a) + f(b));
        for i in 1..n - 1 {
            s += f(a + i as f64 * h);
        }
        s * h
    }

    fn pdf(m: f64, v: f64, x: f64) -> f64 {
        (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }

    fn window(pairs: &[(f64, f64)]) -> (f64, f64) {
        let lo = pairs
            .iter()
            .map(|(m, v)| m - 14.0 * v.sqrt())
            .fold(f64::INFINITY, f64::min);
        let hi = pairs
            .iter()
            .map(|(m, v)| m + 14.0 * v.sqrt())
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    fn kl_quadrature(q: (f64, f64), p: (f64, f64)) -> f64 {
        let (lo, hi) = window(&[q, p]);
        trapz(
            |x| {
                let a = pdf(q.0, q.1, x);
                if a == 0.0 {
                    0.0
                } else {
                    a * (a.ln() - pdf(p.0, p.1, x).ln())
                }
            },
            lo,
            hi,
            40001,
        )
    }

    fn ar_quadrature(q: (f64, f64), p: (f64, f64), alpha: f64) -> f64 {
        // the integrand is a Gaussian bump; cover it as well as q and p
        let lam = alpha / q.1 + (1.0 - alpha) / p.1;
        let bump = ((alpha * q.0 / q.1 + (1.0 - alpha) * p.0 / p.1) / lam, 1.0 / lam);
        let (lo, hi) = window(&[q, p, bump]);
        // log-space integrand to avoid under/overflow of the powers
        let lq = |x: f64| -(x - q.0).powi(2) / (2.0 * q.1) - 0.5 * (2.0 * std::f64::consts::PI * q.1).ln();
        let lp = |x: f64| -(x - p.0).powi(2) / (2.0 * p.1) - 0.5 * (2.0 * std::f64::consts::PI * p.1).ln();
        let integral = trapz(|x| (alpha * lq(x) + (1.0 - alpha) * lp(x)).exp(), lo, hi, 40001);
        integral.ln() / (alpha * (alpha - 1.0))
    }

    #[test]
    fn kl_identity_and_known_value() {
        let q = uni(0.3, 2.0);
        assert_eq!(divergence(&DivergenceSpec::Kl, &q, &q).unwrap(), 0.0);
        let v = divergence(&DivergenceSpec::Kl, &uni(1.0, 1.0), &uni(0.0, 1.0)).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!((kl_quadrature((1.0, 1.0), (0.0, 1.0)) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn closed_forms_match_univariate_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = (rng.random_range(-2.0..2.0), rng.random_range(0.3..3.0));
            let p = (rng.random_range(-2.0..2.0), rng.random_range(0.3..3.0));
            let (qn, pn) = (uni(q.0, q.1), uni(p.0, p.1));
            let kl_cf = divergence(&DivergenceSpec::Kl, &qn, &pn).unwrap();
            assert!((kl_cf - kl_quadrature(q, p)).abs() < 1e-8, "KL {q:?} {p:?}");
            let rkl = divergence(&DivergenceSpec::ReverseKl, &qn, &pn).unwrap();
            assert!((rkl - kl_quadrature(p, q)).abs() < 1e-8);
            for alpha in [2.0, 0.5, 1.5, -0.5] {
                match divergence(&DivergenceSpec::AlphaRenyi { alpha }, &qn, &pn) {
                    Ok(cf) => {
                        let quad = ar_quadrature(q, p, alpha);
                        assert!((cf - quad).abs() < 1e-8, "AR({alpha}) {q:?} {p:?}: {cf} vs {quad}");
                    }
                    Err(FedGviError::AlphaBlendNotPositiveDefinite { .. }) => {
                        let blend = alpha / q.1 + (1.0 - alpha) / p.1;
                        assert!(blend <= 0.0);
                    }
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }

    #[test]
    fn alpha_renyi_zero_at_identity() {
        let q = uni(0.0, 1.0);
        let v = divergence(&DivergenceSpec::AlphaRenyi { alpha: 2.0 }, &q, &q).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn alpha_renyi_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = uni(rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
            let p = uni(rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
            let kl_v = divergence(&DivergenceSpec::Kl, &q, &p).unwrap();
            let rkl_v = divergence(&DivergenceSpec::ReverseKl, &q, &p).unwrap();
            for eps in [1e-6, -1e-6] {
                let near_one = divergence(&DivergenceSpec::AlphaRenyi { alpha: 1.0 + eps }, &q, &p).unwrap();
                assert!((near_one - kl_v).abs() < 1e-4);
                let near_zero = divergence(&DivergenceSpec::AlphaRenyi { alpha: eps }, &q, &p).unwrap();
                assert!((near_zero - rkl_v).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn alpha_blend_failure_is_distinct() {
        // α = 3 with a much wider q: 3/4 − 2/1 < 0
        let err = divergence(
            &DivergenceSpec::AlphaRenyi { alpha: 3.0 },
            &uni(0.0, 4.0),
            &uni(0.0, 1.0),
        )
        .unwrap_err();
        assert!(matches!(err, FedGviError::AlphaBlendNotPositiveDefinite { .. }));
    }

    #[test]
    fn weighted_kl_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = uni(rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
            let p = uni(rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
            let a = divergence(&DivergenceSpec::WeightedKl { w: 2.0 }, &q, &p).unwrap();
            let b = divergence(&DivergenceSpec::Kl, &q, &p).unwrap();
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_parameters() {
        let q = uni(0.0, 1.0);
        for spec in [
            DivergenceSpec::WeightedKl { w: 0.0 },
            DivergenceSpec::AlphaRenyi { alpha: 1.0 },
            DivergenceSpec::AlphaRenyi { alpha: 0.0 },
        ] {
            assert!(matches!(
                divergence(&spec, &q, &q),
                Err(FedGviError::InvalidParameter(_))
            ));
        }
        let improper = uni(0.0, 1.0).divide(&uni(0.0, 0.5)).unwrap();
        assert!(divergence(&DivergenceSpec::Kl, &improper, &q).is_err());
        assert!(matches!(
            divergence(&DivergenceSpec::FisherRao, &NatGaussian::standard(2), &NatGaussian::standard(2)),
            Err(FedGviError::Unsupported(_))
        ));
    }

    /// Length of the geodesic between two univariate Gaussians, integrated
    /// numerically along the semicircle geodesic of the `(μ/√2, σ)` half-plane
    /// using the metric `ds² = (dμ² + 2dσ²)/σ²`.
    fn fisher_rao_geodesic_quadrature(a: (f64, f64), b: (f64, f64)) -> f64 {
        let (u1, s1) = (a.0 / 2f64.sqrt(), a.1);
        let (u2, s2) = (b.0 / 2f64.sqrt(), b.1);
        let n = 200_000;
        let path: Box<dyn Fn(f64) -> (f64, f64)> = if (u1 - u2).abs() < 1e-14 {
            Box::new(move |t| (u1, s1 + t * (s2 - s1)))
        } else {
            let c = (u2 * u2 + s2 * s2 - u1 * u1 - s1 * s1) / (2.0 * (u2 - u1));
            let r = ((u1 - c).powi(2) + s1 * s1).sqrt();
            let t1 = s1.atan2(u1 - c);
            let t2 = s2.atan2(u2 - c);
            Box::new(move |t| {
                let ang = t1 + t * (t2 - t1);
                (c + r * ang.cos(), r * ang.sin())
            })
        };
        // Simpson's rule over the arc parameter, metric in (μ, σ) coordinates.
        let speed = |t: f64| {
            let h = 1e-6;
            let (ua, sa) = path(t - h);
            let (ub, sb) = path(t + h);
            let (_, s) = path(t);
            let dmu = (ub - ua) * 2f64.sqrt() / (2.0 * h);
            let ds = (sb - sa) / (2.0 * h);
            ((dmu * dmu + 2.0 * ds * ds) / (s * s)).sqrt()
        };
        let h = 1.0 / n as f64;
        let mut acc = speed(0.0) + speed(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * speed(i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn fisher_rao_matches_geodesic_length() {
        let q = MomentGaussian::univariate(0.0, 1.0).unwrap();
        let p = MomentGaussian::univariate(1.0, 1.0).unwrap();
        let cf = fisher_rao_1d(&q, &p).unwrap();
        let quad = fisher_rao_geodesic_quadrature((0.0, 1.0), (1.0, 1.0));
        assert!((cf - quad).abs() < 1e-6, "{cf} vs {quad}");
        let q = MomentGaussian::univariate(-0.5, 0.25).unwrap();
        let p = MomentGaussian::univariate(2.0, 3.0).unwrap();
        let quad = fisher_rao_geodesic_quadrature((-0.5, 0.5), (2.0, 3f64.sqrt()));
        assert!((fisher_rao_1d(&q, &p).unwrap() - quad).abs() < 1e-6);
        // pure scale change: √2 |log(σ₂/σ₁)|
        let q = MomentGaussian::univariate(0.0, 1.0).unwrap();
        let p = MomentGaussian::univariate(0.0, 4.0).unwrap();
        assert!((fisher_rao_1d(&q, &p).unwrap() - 2f64.sqrt() * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fisher_rao_symmetric_and_zero_on_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let q = MomentGaussian::univariate(rng.random_range(-3.0..3.0), rng.random_range(0.1..3.0)).unwrap();
            let p = MomentGaussian::univariate(rng.random_range(-3.0..3.0), rng.random_range(0.1..3.0)).unwrap();
            let a = fisher_rao_1d(&q, &p).unwrap();
            let b = fisher_rao_1d(&p, &q).unwrap();
            assert!((a - b).abs() < 1e-12 * a.max(1.0));
            assert_eq!(fisher_rao_1d(&q, &q).unwrap(), 0.0);
        }
    }

    fn random_vp(rng: &mut ChaCha8Rng, d: usize) -> VariationalParams {
        VariationalParams::new(
            DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5)),
            DVector::from_fn(d, |_, _| rng.random_range(-0.6..0.6)),
        )
        .unwrap()
    }

    fn fd_check(spec: DivergenceSpec, q: &VariationalParams, p: &NatGaussian) {
        let g = divergence_grad(&spec, q, p).unwrap();
        let x = q.to_flat();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fp = divergence(&spec, &VariationalParams::from_flat(&xp).to_nat().unwrap(), p).unwrap();
            let fm = divergence(&spec, &VariationalParams::from_flat(&xm).to_nat().unwrap(), p).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let scale = g.amax().max(1.0);
            assert!(
                (fd - g[i]).abs() < 1e-6 * scale,
                "{spec:?} component {i}: analytic {} vs fd {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for k in 0..50 {
            let d = if k % 2 == 0 { 1 } else { 2 };
            let q = random_vp(&mut rng, d);
            let p = random_vp(&mut rng, d).to_nat().unwrap();
            fd_check(DivergenceSpec::Kl, &q, &p);
            fd_check(DivergenceSpec::WeightedKl { w: 0.7 }, &q, &p);
            fd_check(DivergenceSpec::ReverseKl, &q, &p);
            for alpha in [0.5, 1.5] {
                let qn = q.to_nat().unwrap();
                if divergence(&DivergenceSpec::AlphaRenyi { alpha }, &qn, &p).is_ok() {
                    fd_check(DivergenceSpec::AlphaRenyi { alpha }, &q, &p);
                }
            }
            if d == 1 {
                fd_check(DivergenceSpec::FisherRao, &q, &p);
            }
        }
        // dense second argument
        let q = random_vp(&mut rng, 2);
        let p = NatGaussian::from_dense(
            DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]),
            DVector::from_vec(vec![0.2, -0.3]),
        )
        .unwrap();
        fd_check(DivergenceSpec::Kl, &q, &p);
        fd_check(DivergenceSpec::ReverseKl, &q, &p);
        fd_check(DivergenceSpec::AlphaRenyi { alpha: 1.5 }, &q, &p);
    }

    #[test]
    fn gradient_vanishes_at_identity() {
        let q = VariationalParams::new(DVector::from_vec(vec![0.4, -1.0]), DVector::from_vec(vec![0.2, -0.1])).unwrap();
        let p = q.to_nat().unwrap();
        for spec in [
            DivergenceSpec::Kl,
            DivergenceSpec::WeightedKl { w: 3.0 },
            DivergenceSpec::ReverseKl,
            DivergenceSpec::AlphaRenyi { alpha: 2.5 },
        ] {
            assert!(divergence_grad(&spec, &q, &p).unwrap().amax() < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn weighted_kl_gradient_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_vp(&mut rng, 2);
        let p = random_vp(&mut rng, 2).to_nat().unwrap();
        let a = divergence_grad(&DivergenceSpec::WeightedKl { w: 4.0 }, &q, &p).unwrap();
        let b = divergence_grad(&DivergenceSpec::Kl, &q, &p).unwrap();
        assert!((a * 4.0 - b).amax() < 1e-14);
    }
}
