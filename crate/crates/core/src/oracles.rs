//! Brute-force references: tabulated densities, quadrature divergences,
//! geodesic Fisher–Rao lengths and a numeric certifier for conjugate updates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::client::conjugate_update;
use crate::divergences::fisher_rao_1d;
use crate::error::{FedGviError, Result};
use crate::exp_family::NatGaussian;
use crate::losses::{point_loss, Datum, LossSpec};

pub const GRID_POINTS_1D: usize = 8192;
pub const GRID_POINTS_2D: usize = 512;
pub const GRID_HALF_WIDTH_SD: f64 = 10.0;
pub const BOUNDARY_MASS_LIMIT: f64 = 1e-6;

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + i as f64 * h).collect()
}

fn trapezoid_weights(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    let h = (axis[n - 1] - axis[0]) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
        .collect()
}

/// A density tabulated on a 1D axis or a 2D tensor grid (row-major, first
/// axis slowest).
#[derive(Clone, Debug)]
pub struct GriddedDensity {
    pub axes: Vec<Vec<f64>>,
    pub density: Vec<f64>,
}

impl GriddedDensity {
    fn points(axes: &[Vec<f64>]) -> Vec<DVector<f64>> {
        match axes.len() {
            1 => axes[0].iter().map(|&t| DVector::from_vec(vec![t])).collect(),
            2 => axes[0]
                .iter()
                .flat_map(|&a| axes[1].iter().map(move |&b| DVector::from_vec(vec![a, b])))
                .collect(),
            _ => unreachable!("grids are 1D or 2D"),
        }
    }

    fn weights(axes: &[Vec<f64>]) -> Vec<f64> {
        match axes.len() {
            1 => trapezoid_weights(&axes[0]),
            2 => {
                let (wa, wb) = (trapezoid_weights(&axes[0]), trapezoid_weights(&axes[1]));
                wa.iter().flat_map(|&a| wb.iter().map(move |&b| a * b)).collect()
            }
            _ => unreachable!("grids are 1D or 2D"),
        }
    }

    /// Tabulates `exp(log_f)` and normalises by the trapezoid rule.
    pub fn from_log_fn(
        axes: Vec<Vec<f64>>,
        log_f: impl Fn(&DVector<f64>) -> Result<f64>,
    ) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 || axes.iter().any(|a| a.len() < 3) {
            return Err(FedGviError::Unsupported("grids must be 1D or 2D".into()));
        }
        let logs = Self::points(&axes)
            .iter()
            .map(&log_f)
            .collect::<Result<Vec<f64>>>()?;
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let density = logs.iter().map(|l| (l - max).exp()).collect();
        let mut g = GriddedDensity { axes, density };
        g.normalise();
        Ok(g)
    }

    pub fn from_gaussian(axes: Vec<Vec<f64>>, q: &NatGaussian) -> Result<Self> {
        GriddedDensity::from_log_fn(axes, |t| q.log_pdf(t))
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn mass(&self) -> f64 {
        Self::weights(&self.axes)
            .iter()
            .zip(&self.density)
            .map(|(w, d)| w * d)
            .sum()
    }

    pub fn normalise(&mut self) {
        let m = self.mass();
        for d in &mut self.density {
            *d /= m;
        }
    }

    /// `∫ f p` by the trapezoid rule.
    pub fn expectation(&self, mut f: impl FnMut(&DVector<f64>) -> f64) -> f64 {
        Self::points(&self.axes)
            .iter()
            .zip(Self::weights(&self.axes))
            .zip(&self.density)
            .map(|((t, w), d)| if *d == 0.0 { 0.0 } else { w * d * f(t) })
            .sum()
    }

    pub fn mean(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| self.expectation(|t| t[j]))
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| {
            self.expectation(|t| (t[i] - m[i]) * (t[j] - m[j]))
        })
    }

    /// Probability mass in the outermost cells along every axis.
    pub fn boundary_mass(&self) -> f64 {
        let w = Self::weights(&self.axes);
        let pts = Self::points(&self.axes);
        let edge = |t: &DVector<f64>| {
            self.axes
                .iter()
                .enumerate()
                .any(|(j, a)| t[j] == a[0] || t[j] == a[a.len() - 1])
        };
        pts.iter()
            .zip(w.iter().zip(&self.density))
            .filter(|(t, _)| edge(t))
            .map(|(_, (w, d))| 2.0 * w * d)
            .sum()
    }
}

/// Axis of `n` points over `centre ± half_width_sd · sd`.
pub fn axis_around(centre: f64, sd: f64, n: usize) -> Vec<f64> {
    linspace(
        centre - GRID_HALF_WIDTH_SD * sd,
        centre + GRID_HALF_WIDTH_SD * sd,
        n,
    )
}

/// Standard grid for a 1D or 2D density with the given moments.
pub fn default_axes(mean: &DVector<f64>, sds: &DVector<f64>) -> Vec<Vec<f64>> {
    let n = if mean.len() == 1 {
        GRID_POINTS_1D
    } else {
        GRID_POINTS_2D
    };
    (0..mean.len())
        .map(|j| axis_around(mean[j], sds[j], n))
        .collect()
}

/// `π(θ) exp{−β Σ L(θ, x_i)} / Z` on the given grid.
pub fn gbi_posterior_grid(
    prior: &NatGaussian,
    loss: &LossSpec,
    data: &[Datum],
    beta: f64,
    axes: Vec<Vec<f64>>,
) -> Result<GriddedDensity> {
    if prior.dim() != axes.len() {
        return Err(FedGviError::GridMismatch);
    }
    let g = GriddedDensity::from_log_fn(axes, |t| {
        let mut l = 0.0;
        for z in data {
            l += point_loss(loss, t, z)?;
        }
        Ok(prior.log_pdf(t)? - beta * l)
    })?;
    let b = g.boundary_mass();
    if b > BOUNDARY_MASS_LIMIT {
        return Err(FedGviError::GridTooNarrow { boundary_mass: b });
    }
    Ok(g)
}

/// GBI posterior on a grid placed by a coarse pre-pass over a wide window
/// that covers the prior and the data.
pub fn gbi_posterior_auto(
    prior: &NatGaussian,
    loss: &LossSpec,
    data: &[Datum],
    beta: f64,
) -> Result<GriddedDensity> {
    let d = prior.dim();
    let pm = prior.to_moment()?;
    let psd = pm.std_devs();
    let coarse_axes: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut lo = pm.mean[j] - 12.0 * psd[j];
            let mut hi = pm.mean[j] + 12.0 * psd[j];
            for z in data {
                if let Some(&x) = z.x.get(j) {
                    lo = lo.min(x - 5.0);
                    hi = hi.max(x + 5.0);
                }
            }
            linspace(lo, hi, if d == 1 { 20_001 } else { 401 })
        })
        .collect();
    let coarse = GriddedDensity::from_log_fn(coarse_axes, |t| {
        let mut l = 0.0;
        for z in data {
            l += point_loss(loss, t, z)?;
        }
        Ok(prior.log_pdf(t)? - beta * l)
    })?;
    let mean = coarse.mean();
    let sds = coarse.covariance().diagonal().map(f64::sqrt);
    gbi_posterior_grid(prior, loss, data, beta, default_axes(&mean, &sds))
}

fn same_axes(a: &GriddedDensity, b: &GriddedDensity) -> bool {
    a.axes.len() == b.axes.len()
        && a.axes.iter().zip(&b.axes).all(|(x, y)| {
            x.len() == y.len() && x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits())
        })
}

/// `∫ |a − b|` by the trapezoid rule.
pub fn l1_distance(a: &GriddedDensity, b: &GriddedDensity) -> Result<f64> {
    if !same_axes(a, b) {
        return Err(FedGviError::GridMismatch);
    }
    Ok(GriddedDensity::weights(&a.axes)
        .iter()
        .zip(a.density.iter().zip(&b.density))
        .map(|(w, (x, y))| w * (x - y).abs())
        .sum())
}

/// `∫ |a − q|` with `q` tabulated on the grid of `a`.
pub fn l1_to_gaussian(a: &GriddedDensity, q: &NatGaussian) -> Result<f64> {
    if q.dim() != a.dim() {
        return Err(FedGviError::GridMismatch);
    }
    let b = GriddedDensity {
        axes: a.axes.clone(),
        density: GriddedDensity::points(&a.axes)
            .iter()
            .map(|t| q.log_pdf(t).map(f64::exp))
            .collect::<Result<Vec<_>>>()?,
    };
    l1_distance(a, &b)
}

/// Axes wide enough for every factor listed.
pub fn covering_axes(factors: &[&NatGaussian]) -> Result<Vec<Vec<f64>>> {
    let d = factors[0].dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for f in factors {
        let m = f.to_moment()?;
        let sd = m.std_devs();
        for j in 0..d {
            lo[j] = lo[j].min(m.mean[j] - 14.0 * sd[j]);
            hi[j] = hi[j].max(m.mean[j] + 14.0 * sd[j]);
        }
    }
    let n = if d == 1 { 40_001 } else { GRID_POINTS_2D };
    Ok((0..d).map(|j| linspace(lo[j], hi[j], n)).collect())
}

/// `∫ q log(q/p)` by quadrature.
pub fn kl_quadrature(q: &NatGaussian, p: &NatGaussian) -> Result<f64> {
    let axes = covering_axes(&[q, p])?;
    let g = GriddedDensity::from_gaussian(axes, q)?;
    let mut err = None;
    let v = g.expectation(|t| match (q.log_pdf(t), p.log_pdf(t)) {
        (Ok(a), Ok(b)) => a - b,
        (Err(e), _) | (_, Err(e)) => {
            err = Some(e);
            0.0
        }
    });
    err.map_or(Ok(v), Err)
}

/// `1/(α(α−1)) log ∫ q^α p^{1−α}` by quadrature.
pub fn alpha_renyi_quadrature(q: &NatGaussian, p: &NatGaussian, alpha: f64) -> Result<f64> {
    let blend = q.power(alpha).multiply(&p.power(1.0 - alpha))?;
    if !blend.is_proper() {
        return Err(FedGviError::AlphaBlendNotPositiveDefinite { alpha });
    }
    let axes = covering_axes(&[q, p, &blend])?;
    let pts = GriddedDensity::points(&axes);
    let w = GriddedDensity::weights(&axes);
    let mut integral = 0.0;
    for (t, w) in pts.iter().zip(w) {
        integral += w * (alpha * q.log_pdf(t)? + (1.0 - alpha) * p.log_pdf(t)?).exp();
    }
    Ok(integral.ln() / (alpha * (alpha - 1.0)))
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Fisher–Rao distance between `N(μ₁, s₁²)` and `N(μ₂, s₂²)` as the numerically
/// integrated length of the geodesic in the `(μ, σ)` half-plane with metric
/// `(dμ² + 2dσ²)/σ²`.
pub fn fisher_rao_geodesic(mu1: f64, s1: f64, mu2: f64, s2: f64) -> f64 {
    // in (u, σ) = (μ/√2, σ) the metric is 2(du² + dσ²)/σ²
    let (u1, u2) = (mu1 / std::f64::consts::SQRT_2, mu2 / std::f64::consts::SQRT_2);
    let sqrt2 = std::f64::consts::SQRT_2;
    if (u1 - u2).abs() < 1e-300 {
        return sqrt2 * simpson(|s| 1.0 / s, s1.min(s2), s1.max(s2), 20_000);
    }
    // geodesics are semicircles centred on the boundary
    let c = (u2 * u2 + s2 * s2 - u1 * u1 - s1 * s1) / (2.0 * (u2 - u1));
    let phi1 = s1.atan2(u1 - c);
    let phi2 = s2.atan2(u2 - c);
    let (a, b) = (phi1.min(phi2), phi1.max(phi2));
    // arc length element r dφ over height r sin φ
    sqrt2 * simpson(|phi| 1.0 / phi.sin(), a, b, 20_000)
}

/// Gauss–Hermite nodes and weights for `∫ e^{−x²} f(x) dx` (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

#[derive(Clone, Debug, Serialize)]
pub struct CertificationReport {
    pub closed_mean: f64,
    pub closed_sd: f64,
    pub numeric_mean: f64,
    pub numeric_sd: f64,
    pub max_diff: f64,
    pub passed: bool,
}

pub const CERTIFY_TOLERANCE: f64 = 1e-6;

/// `E_q[Σ L] + (1/β) KL(q : ρ)` for `q = N(μ, e^{2ℓ})`, both terms by
/// Gauss–Hermite quadrature of point evaluations.
fn certify_objective(
    mu: f64,
    log_sd: f64,
    spec: &LossSpec,
    cavity: &NatGaussian,
    data: &[Datum],
    beta: f64,
    gh: &(Vec<f64>, Vec<f64>),
) -> Result<f64> {
    let sd = log_sd.exp();
    let norm = std::f64::consts::PI.sqrt();
    let q = NatGaussian::univariate(mu, sd * sd)?;
    let mut total = 0.0;
    for (x, w) in gh.0.iter().zip(&gh.1) {
        let t = DVector::from_vec(vec![mu + std::f64::consts::SQRT_2 * sd * x]);
        let mut l = 0.0;
        for z in data {
            l += point_loss(spec, &t, z)?;
        }
        let kl = q.log_pdf(&t)? - cavity.log_pdf(&t)?;
        total += w / norm * (l + kl / beta);
    }
    Ok(total)
}

/// Compares a candidate posterior with the numeric argmin of
/// `E_q[Σ L] + (1/β) KL(q : ρ)` over univariate Gaussians `q`.
pub fn certify_candidate(
    candidate: &NatGaussian,
    spec: &LossSpec,
    cavity: &NatGaussian,
    data: &[Datum],
    beta: f64,
) -> Result<CertificationReport> {
    if cavity.dim() != 1 || candidate.dim() != 1 {
        return Err(FedGviError::Unsupported("certification is univariate".into()));
    }
    let spec = spec.centred(&cavity.mean()?);
    let gh = gauss_hermite(40);
    let f = |x: [f64; 2]| certify_objective(x[0], x[1], &spec, cavity, data, beta, &gh);
    // Newton with central finite-difference derivatives
    let cm = cavity.to_moment()?;
    let mut x = [cm.mean[0], 0.5 * cm.covariance.get(0, 0).ln()];
    let h = 1e-4;
    let mut converged = false;
    for _ in 0..200 {
        let f0 = f(x)?;
        let mut g = [0.0; 2];
        let mut hess = [[0.0; 2]; 2];
        for i in 0..2 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let (fp, fm) = (f(xp)?, f(xm)?);
            g[i] = (fp - fm) / (2.0 * h);
            hess[i][i] = (fp - 2.0 * f0 + fm) / (h * h);
        }
        let mut corners = [0.0; 4];
        for (k, (a, b)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].iter().enumerate() {
            corners[k] = f([x[0] + a * h, x[1] + b * h])?;
        }
        hess[0][1] = (corners[0] - corners[1] - corners[2] + corners[3]) / (4.0 * h * h);
        hess[1][0] = hess[0][1];
        let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
        let step = if det > 0.0 && hess[0][0] > 0.0 {
            [
                (hess[1][1] * g[0] - hess[0][1] * g[1]) / det,
                (hess[0][0] * g[1] - hess[1][0] * g[0]) / det,
            ]
        } else {
            [g[0] * 0.1, g[1] * 0.1]
        };
        // damped: halve until the objective does not increase
        let mut t = 1.0;
        let mut next = [x[0] - step[0], x[1] - step[1]];
        while f(next)? > f0 && t > 1e-8 {
            t *= 0.5;
            next = [x[0] - t * step[0], x[1] - t * step[1]];
        }
        let newton_len = step[0].abs().max(step[1].abs());
        x = next;
        let predicted = 0.5 * (g[0] * step[0] + g[1] * step[1]).abs();
        if newton_len < 1e-10 || predicted <= 1e-14 * f0.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(FedGviError::NonConvergence {
            iterations: 200,
            grad_norm: f64::NAN,
        });
    }
    let m = candidate.to_moment()?;
    let (cmean, csd) = (m.mean[0], m.covariance.get(0, 0).sqrt());
    let (nmean, nsd) = (x[0], x[1].exp());
    let max_diff = (cmean - nmean).abs().max((csd - nsd).abs());
    Ok(CertificationReport {
        closed_mean: cmean,
        closed_sd: csd,
        numeric_mean: nmean,
        numeric_sd: nsd,
        max_diff,
        passed: max_diff < CERTIFY_TOLERANCE,
    })
}

/// Certifies the library's conjugate update for `spec` under `KL/β`.
pub fn certify_conjugate(
    spec: &LossSpec,
    cavity: &NatGaussian,
    data: &[Datum],
    beta: f64,
) -> Result<CertificationReport> {
    let candidate = conjugate_update(cavity, spec, data, beta)?
        .ok_or_else(|| FedGviError::Unsupported("loss has no conjugate update".into()))?;
    certify_candidate(&candidate, spec, cavity, data, beta)
}

/// Fisher–Rao distances `FR(q(z₀) : q(z))` for each outlier position, where
/// `posterior_with_outlier(z)` runs the federation with the extra datum `z`.
pub fn pif_curve(
    reference_z: f64,
    zs: &[f64],
    posterior_with_outlier: impl Fn(f64) -> Result<NatGaussian>,
) -> Result<Vec<(f64, f64)>> {
    let reference = posterior_with_outlier(reference_z)?.to_moment()?;
    zs.iter()
        .map(|&z| {
            let q = posterior_with_outlier(z)?.to_moment()?;
            Ok((z, fisher_rao_1d(&reference, &q)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LossKind, ModelSpec, WeightKernel};

    fn loc(kind: LossKind) -> LossSpec {
        LossSpec::new(kind, ModelSpec::GaussianLocation { sigma: 1.0, dim: 1 })
    }

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        let (x, w) = gauss_hermite(20);
        let sum: f64 = w.iter().sum();
        assert!((sum - std::f64::consts::PI.sqrt()).abs() < 1e-13);
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert!((m2 - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-13);
    }

    #[test]
    fn conjugate_nll_grid_matches_closed_form() {
        let prior = NatGaussian::univariate(0.0, 1.0).unwrap();
        let data: Vec<Datum> = [1.0, 2.5, -0.5].iter().map(|&x| Datum::point(x)).collect();
        let g = gbi_posterior_auto(&prior, &loc(LossKind::Nll), &data, 1.0).unwrap();
        let exact = NatGaussian::univariate(3.0 / 4.0, 0.25).unwrap();
        assert!(l1_to_gaussian(&g, &exact).unwrap() < 1e-8);
        assert!((g.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_temperature_gives_prior_and_refinement_is_stable() {
        let prior = NatGaussian::univariate(0.3, 2.0).unwrap();
        let data = vec![Datum::point(4.0)];
        let spec = loc(LossKind::Beta { beta: 0.5 });
        let g = gbi_posterior_auto(&prior, &spec, &data, 0.0).unwrap();
        assert!(l1_to_gaussian(&g, &prior).unwrap() < 1e-8);
        // resolution refinement
        let exact_axes = |n| vec![linspace(-12.0, 12.0, n)];
        let a = gbi_posterior_grid(&prior, &spec, &data, 1.0, exact_axes(4097)).unwrap();
        let b = gbi_posterior_grid(&prior, &spec, &data, 1.0, exact_axes(8193)).unwrap();
        let fine_on_coarse = GriddedDensity {
            axes: a.axes.clone(),
            density: b.density.iter().step_by(2).copied().collect(),
        };
        assert!(l1_distance(&a, &fine_on_coarse).unwrap() < 1e-9);
    }

    #[test]
    fn narrow_grid_is_rejected() {
        let prior = NatGaussian::univariate(0.0, 1.0).unwrap();
        let r = gbi_posterior_grid(&prior, &loc(LossKind::Nll), &[], 1.0, vec![linspace(-1.0, 1.0, 101)]);
        assert!(matches!(r, Err(FedGviError::GridTooNarrow { .. })));
    }

    #[test]
    fn l1_basics() {
        let q = NatGaussian::univariate(0.0, 1.0).unwrap();
        let g = GriddedDensity::from_gaussian(vec![axis_around(0.0, 1.0, 2001)], &q).unwrap();
        assert_eq!(l1_distance(&g, &g).unwrap(), 0.0);
        assert!(l1_to_gaussian(&g, &q).unwrap() < 1e-8);
        let p = NatGaussian::univariate(0.5, 1.0).unwrap();
        let h = GriddedDensity::from_gaussian(g.axes.clone(), &p).unwrap();
        let d1 = l1_distance(&g, &h).unwrap();
        assert_eq!(d1, l1_distance(&h, &g).unwrap());
        assert!(d1 > 0.0 && d1 <= 2.0);
        let other = GriddedDensity::from_gaussian(vec![axis_around(0.0, 1.0, 2000)], &q).unwrap();
        assert!(matches!(l1_distance(&g, &other), Err(FedGviError::GridMismatch)));
    }

    #[test]
    fn geodesic_scale_only_case() {
        let v = fisher_rao_geodesic(0.0, 1.0, 0.0, 2.0);
        assert!((v - std::f64::consts::SQRT_2 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn geodesic_matches_closed_form_distance() {
        use crate::exp_family::MomentGaussian;
        for &(m1, s1, m2, s2) in &[(0.0, 1.0, 1.0, 1.0), (-2.0, 0.5, 3.0, 2.5), (0.3, 1.7, 0.1, 0.2)] {
            let a = MomentGaussian::univariate(m1, s1 * s1).unwrap();
            let b = MomentGaussian::univariate(m2, s2 * s2).unwrap();
            let closed = fisher_rao_1d(&a, &b).unwrap();
            let numeric = fisher_rao_geodesic(m1, s1, m2, s2);
            assert!((closed - numeric).abs() < 1e-9, "{closed} vs {numeric}");
        }
    }

    #[test]
    fn certification_and_negative_control() {
        let cavity = NatGaussian::univariate(0.2, 1.3).unwrap();
        let data: Vec<Datum> = [0.5, -1.0, 1.7, 3.0].iter().map(|&x| Datum::point(x)).collect();
        let kernel = WeightKernel::SquaredExponential { beta_w: 1.0, c: 2.0 };
        let spec = loc(LossKind::ScoreMatching { kernel });
        let rep = certify_conjugate(&spec, &cavity, &data, 0.8).unwrap();
        assert!(rep.passed, "{rep:?}");
        let nll = certify_conjugate(&loc(LossKind::Nll), &cavity, &data, 1.0).unwrap();
        assert!(nll.passed, "{nll:?}");
        // corrupted quadratic coefficient
        let (b2, b1) = crate::losses::score_matching_coeffs(
            &spec,
            &data,
            &cavity.mean().unwrap(),
        )
        .unwrap();
        let n = data.len() as f64;
        let bad = b2.add(&crate::linalg::SymMat::identity(1).scale(0.1)).unwrap();
        let site = NatGaussian::new(bad.scale(2.0 * 0.8 * n), b1 * (-0.8 * n)).unwrap();
        let wrong = cavity.multiply(&site).unwrap();
        let rep = certify_candidate(&wrong, &spec, &cavity, &data, 0.8).unwrap();
        assert!(!rep.passed && rep.max_diff > 1e-3);
    }
}
