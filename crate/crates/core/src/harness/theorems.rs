//! Executable checks of the protocol's guarantees against brute-force
//! references.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::client::{CavityMode, ClientConfig, ClientState};
use crate::divergences::{divergence, fisher_rao_1d, DivergenceSpec};
use crate::engine::Federation;
use crate::error::Result;
use crate::exp_family::{MomentGaussian, NatGaussian};
use crate::harness::config::RunConfig;
use crate::harness::data::{gen_clutter, partition_homogeneous};
use crate::linalg::SymMat;
use crate::losses::{
    density_power_integral, expected_loss, point_loss, score_matching_coeffs, Datum, LossKind,
    LossSpec, ModelSpec, MonteCarlo, WeightKernel,
};
use crate::oracles::{
    alpha_renyi_quadrature, certify_candidate, certify_conjugate, covering_axes, fisher_rao_geodesic,
    gbi_posterior_auto, kl_quadrature, l1_to_gaussian, linspace, GriddedDensity,
};
use crate::server::{pooled_posterior, ServerConfig, ServerState};
use crate::variational::VariationalParams;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// Passes iff `value < threshold`.
    pub fn below(name: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            passed: value < threshold,
            detail: detail.into(),
        }
    }

    /// Passes iff `value > threshold`.
    pub fn above(name: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            passed: value > threshold,
            detail: detail.into(),
        }
    }
}

fn location(sigma: f64) -> ModelSpec {
    ModelSpec::GaussianLocation { sigma, dim: 1 }
}

fn sigma_of(cfg: &RunConfig) -> f64 {
    match cfg.model {
        ModelSpec::GaussianLocation { sigma, .. } => sigma,
        _ => 1.0,
    }
}

fn scalar_prior(cfg: &RunConfig) -> Result<NatGaussian> {
    NatGaussian::univariate(cfg.prior.mean, cfg.prior.variance.unwrap_or(1.0))
}

fn federation(
    cfg: &RunConfig,
    shards: &[Vec<Datum>],
    client: &ClientConfig,
    server: ServerConfig,
) -> Result<Federation> {
    let clients = shards
        .iter()
        .enumerate()
        .map(|(i, s)| ClientState::new(i as u32, s.clone(), client.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    Ok(Federation::new(ServerState::new(scalar_prior(cfg)?, server)?, clients))
}

fn clutter_shards(cfg: &RunConfig, m: usize) -> Result<(Vec<Datum>, Vec<Vec<Datum>>)> {
    let d = gen_clutter(cfg.data.n, cfg.data.epsilon, cfg.seed)?;
    let shards = partition_homogeneous(&d.data, m, cfg.seed);
    Ok((d.data, shards))
}

fn nll_client(cfg: &RunConfig, tau: f64, w: f64) -> ClientConfig {
    ClientConfig::new(
        LossSpec::new(LossKind::Nll, location(sigma_of(cfg))),
        DivergenceSpec::WeightedKl { w },
        tau,
    )
}

/// Exact tempered posterior `π · Π N(x_i; θ, σ²)^w` in natural parameters.
fn conjugate_gbi(cfg: &RunConfig, data: &[Datum], w: f64) -> Result<NatGaussian> {
    let s2 = sigma_of(cfg).powi(2);
    let v0 = cfg.prior.variance.unwrap_or(1.0);
    let sum: f64 = data.iter().map(|d| d.x[0]).sum();
    NatGaussian::diagonal(
        DVector::from_element(1, 1.0 / v0 + w * data.len() as f64 / s2),
        DVector::from_element(1, cfg.prior.mean / v0 + w * sum / s2),
    )
}

/// One τ = 1 round recovers the tempered posterior and a second round
/// leaves it unchanged.
pub fn gbi_recovery(cfg: &RunConfig, clients: usize) -> Result<Vec<Check>> {
    let (data, shards) = clutter_shards(cfg, clients)?;
    let w = 1.0;
    let mut fed = federation(cfg, &shards, &nll_client(cfg, 1.0, w), ServerConfig::default())?;
    fed.round()?;
    let q1 = fed.server.posterior.clone();
    let spec = LossSpec::new(LossKind::Nll, location(sigma_of(cfg)));
    let grid = gbi_posterior_auto(&scalar_prior(cfg)?, &spec, &data, w)?;
    let l1 = l1_to_gaussian(&grid, &q1)?;
    fed.round()?;
    let drift = fed.server.posterior.nat_distance(&q1)?;
    Ok(vec![
        Check::below(format!("gbi_recovery_l1_m{clients}"), l1, 1e-6, "L1 between first-round server posterior and gridded posterior"),
        Check::below(format!("gbi_recovery_invariance_m{clients}"), drift, 1e-12, "natural-parameter change in round two"),
    ])
}

/// With τ = 1/M the natural-parameter distance to the tempered posterior
/// contracts by (M−1)/M every round.
pub fn geometric_convergence(cfg: &RunConfig, clients: usize) -> Result<Check> {
    let (data, shards) = clutter_shards(cfg, clients)?;
    let tau = 1.0 / clients as f64;
    let target = conjugate_gbi(cfg, &data, 1.0)?;
    let server = ServerConfig {
        tolerance: 0.0,
        ..ServerConfig::default()
    };
    let mut fed = federation(cfg, &shards, &nll_client(cfg, tau, 1.0), server)?;
    let mut dist = Vec::new();
    for _ in 0..21 {
        fed.round()?;
        dist.push(fed.server.posterior.nat_distance(&target)?);
    }
    let expected = (clients as f64 - 1.0) / clients as f64;
    // rounds 2..=20: ratio dist_{t+1} / dist_t
    let worst = (1..20)
        .map(|t| (dist[t + 1] / dist[t] - expected).abs())
        .fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
    Ok(Check::below(
        format!("geometric_contraction_m{clients}"),
        worst,
        1e-6,
        format!("largest deviation of the round-to-round ratio from {expected}"),
    ))
}

/// Under KL at both ends with Σ τ = 1 the server posterior is the
/// logarithmic pool of the client posteriors.
pub fn opinion_pool(cfg: &RunConfig, clients: usize, rounds: usize) -> Result<Vec<Check>> {
    let (_, shards) = clutter_shards(cfg, clients)?;
    let tau = 1.0 / clients as f64;
    let robust = ClientConfig::new(
        LossSpec::new(LossKind::Beta { beta: 0.5 }, location(sigma_of(cfg))),
        DivergenceSpec::Kl,
        tau,
    );
    let mut out = Vec::new();
    for (label, cc) in [("nll", nll_client(cfg, tau, 1.0)), ("beta", robust)] {
        let cc = ClientConfig {
            divergence: DivergenceSpec::Kl,
            ..cc
        };
        let server = ServerConfig {
            tolerance: 0.0,
            ..ServerConfig::default()
        };
        let mut fed = federation(cfg, &shards, &cc, server)?;
        let mut worst: f64 = 0.0;
        for _ in 0..rounds {
            let outcome = fed.round()?;
            let pool = pooled_posterior(&outcome.client_posteriors, &vec![tau; clients])?;
            worst = worst.max(pool.nat_distance(&fed.server.posterior)?);
        }
        out.push(Check::below(
            format!("opinion_pool_{label}"),
            worst,
            1e-12,
            format!("largest natural-parameter gap over {rounds} rounds"),
        ));
    }
    Ok(out)
}

/// Global objective `E_q[Σ L] + (1/w) KL(q : π)` at `(μ, log σ)`.
fn global_objective(
    x: &[f64; 2],
    spec: &LossSpec,
    data: &[Datum],
    prior: &NatGaussian,
    w: f64,
) -> Result<f64> {
    let q = VariationalParams::new(DVector::from_element(1, x[0]), DVector::from_element(1, x[1]))?
        .to_nat()?;
    Ok(expected_loss(spec, &q, data, &MonteCarlo::default())?
        + divergence(&DivergenceSpec::Kl, &q, prior)? / w)
}

/// A converged run sits at a stationary point of the global objective.
pub fn fixed_point_stationarity(cfg: &RunConfig, clients: usize) -> Result<Vec<Check>> {
    let (data, shards) = clutter_shards(cfg, clients)?;
    let prior = scalar_prior(cfg)?;
    let mut out = Vec::new();
    for (label, kind, w) in [
        ("beta", LossKind::Beta { beta: 0.5 }, 1.0),
        ("gamma", LossKind::Gamma { gamma: 1.5 }, 0.5),
    ] {
        let spec = LossSpec::new(kind, location(sigma_of(cfg)));
        let cc = ClientConfig::new(spec.clone(), DivergenceSpec::WeightedKl { w }, 1.0 / clients as f64);
        let server = ServerConfig {
            tolerance: 1e-10,
            ..ServerConfig::default()
        };
        let mut fed = federation(cfg, &shards, &cc, server)?;
        let mut converged = false;
        let mut rounds = 0;
        while !converged && rounds < 2000 {
            converged = fed.round()?.converged;
            rounds += 1;
        }
        let m = fed.server.posterior.to_moment()?;
        let x = [m.mean[0], 0.5 * m.covariance.get(0, 0).ln()];
        let h = 1e-5;
        let mut g = [0.0; 2];
        for i in 0..2 {
            let (mut xp, mut xm) = (x, x);
            xp[i] += h;
            xm[i] -= h;
            g[i] = (global_objective(&xp, &spec, &data, &prior, w)?
                - global_objective(&xm, &spec, &data, &prior, w)?)
                / (2.0 * h);
        }
        let norm = g[0].hypot(g[1]);
        let value = if converged { norm } else { f64::INFINITY };
        out.push(Check::below(
            format!("fixed_point_gradient_{label}"),
            value,
            1e-5,
            format!("finite-difference gradient norm after {rounds} rounds (converged: {converged})"),
        ));
    }
    Ok(out)
}

fn random_kernel(rng: &mut ChaCha8Rng, which: usize) -> LossKind {
    let beta_w = rng.random_range(0.3..2.0);
    let c = rng.random_range(0.5..3.0);
    let kernel = match which {
        0 => WeightKernel::Constant { beta_w },
        1 => WeightKernel::SquaredExponential { beta_w, c },
        _ => WeightKernel::InverseMultiquadric {
            beta_w,
            c,
            a: rng.random_range(0.3..2.0),
        },
    };
    LossKind::ScoreMatching { kernel }
}

/// Closed-form conjugate updates agree with numeric minimisation on random
/// problems; a perturbed quadratic coefficient is caught.
pub fn conjugate_certification(seed: u64, datasets: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = ["nll", "sm_constant", "sm_se", "sm_imq"];
    let mut worst = [0.0f64; 4];
    let mut control_min = f64::INFINITY;
    for _ in 0..datasets {
        let cavity = NatGaussian::univariate(rng.random_range(-2.0..2.0), rng.random_range(0.2..3.0))?;
        let sigma = rng.random_range(0.5..2.0);
        let centre = rng.random_range(-3.0..3.0);
        let n = rng.random_range(1..30);
        let data: Vec<Datum> = (0..n)
            .map(|_| Datum::point(centre + 1.5 * rng.random_range(-1.0..1.0)))
            .collect();
        let w = rng.random_range(0.3..2.0);
        for (k, worst_k) in worst.iter_mut().enumerate() {
            let kind = if k == 0 { LossKind::Nll } else { random_kernel(&mut rng, k - 1) };
            let spec = LossSpec::new(kind, location(sigma));
            let rep = certify_conjugate(&spec, &cavity, &data, w)?;
            *worst_k = worst_k.max(rep.max_diff);
            if k == 1 {
                let (b2, b1) = score_matching_coeffs(&spec, &data, &cavity.mean()?)?;
                let bad = b2.add(&SymMat::identity(1).scale(0.1))?;
                let nn = n as f64;
                let site = NatGaussian::new(bad.scale(2.0 * w * nn), b1 * (-w * nn))?;
                let wrong = cavity.multiply(&site)?;
                control_min = control_min.min(certify_candidate(&wrong, &spec, &cavity, &data, w)?.max_diff);
            }
        }
    }
    let mut out: Vec<Check> = labels
        .iter()
        .zip(worst)
        .map(|(l, v)| {
            Check::below(
                format!("conjugate_certified_{l}"),
                v,
                1e-6,
                format!("largest (mean, sd) gap over {datasets} random problems"),
            )
        })
        .collect();
    out.push(Check::above(
        "conjugate_negative_control",
        control_min,
        1e-3,
        "smallest gap when the quadratic coefficient is perturbed by 0.1",
    ));
    Ok(out)
}

/// Dividing out the site is what makes a τ = 1 pass exact; using the
/// previous server posterior as the local prior double counts.
pub fn cavity_necessity(cfg: &RunConfig) -> Result<Vec<Check>> {
    let (data, shards) = clutter_shards(cfg, 2)?;
    let target = conjugate_gbi(cfg, &data, 1.0)?;
    let server = || ServerConfig {
        tolerance: 0.0,
        ..ServerConfig::default()
    };
    let mut fed = federation(cfg, &shards, &nll_client(cfg, 1.0, 1.0), server())?;
    fed.round()?;
    let with_cavity = fed.server.posterior.nat_distance(&target)?;
    let naive = ClientConfig {
        cavity_mode: CavityMode::PreviousPosterior,
        ..nll_client(cfg, 1.0, 1.0)
    };
    let mut fed = federation(cfg, &shards, &naive, server())?;
    fed.round()?;
    fed.round()?;
    let without = fed.server.posterior.nat_distance(&target)?;
    Ok(vec![
        Check::below("cavity_reaches_target", with_cavity, 1e-10, "natural-parameter distance after one pass"),
        Check::above(
            "previous_posterior_deviates",
            without,
            1e-3,
            "natural-parameter distance after two rounds without the cavity",
        ),
    ])
}

fn random_univariate(rng: &mut ChaCha8Rng) -> Result<NatGaussian> {
    NatGaussian::univariate(rng.random_range(-2.0..2.0), rng.random_range(0.3..3.0))
}

fn random_bivariate(rng: &mut ChaCha8Rng) -> Result<NatGaussian> {
    let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
    let cov = &a * a.transpose() + DMatrix::identity(2, 2) * 0.3;
    let mean = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
    NatGaussian::from_moment(&MomentGaussian::new(mean, SymMat::dense(cov)?)?)
}

fn loss_specs(sigma: f64, dim: usize) -> Vec<(&'static str, LossSpec)> {
    let model = ModelSpec::GaussianLocation { sigma, dim };
    vec![
        ("nll", LossSpec::new(LossKind::Nll, model.clone())),
        ("beta", LossSpec::new(LossKind::Beta { beta: 0.5 }, model.clone())),
        ("gamma", LossSpec::new(LossKind::Gamma { gamma: 1.7 }, model.clone())),
        (
            "score_matching",
            LossSpec::new(
                LossKind::ScoreMatching {
                    kernel: WeightKernel::SquaredExponential { beta_w: 1.0, c: 1.3 },
                },
                model,
            )
            .centred(&DVector::from_element(dim, 0.2)),
        ),
    ]
}

fn quadrature_expected_loss(spec: &LossSpec, q: &NatGaussian, data: &[Datum]) -> Result<f64> {
    let grid = GriddedDensity::from_gaussian(covering_axes(&[q])?, q)?;
    let mut err = None;
    let v = grid.expectation(|t| {
        data.iter()
            .map(|z| {
                point_loss(spec, t, z).unwrap_or_else(|e| {
                    err = Some(e);
                    0.0
                })
            })
            .sum()
    });
    err.map_or(Ok(v), Err)
}

/// Every closed-form divergence and expected loss against quadrature.
pub fn closed_form_checks(seed: u64, pairs: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphas = [-0.5, 0.3, 0.7, 1.5, 2.0];
    let (mut kl1, mut rkl1, mut ar1, mut fr) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..pairs {
        let (q, p) = (random_univariate(&mut rng)?, random_univariate(&mut rng)?);
        kl1 = kl1.max((divergence(&DivergenceSpec::Kl, &q, &p)? - kl_quadrature(&q, &p)?).abs());
        rkl1 = rkl1.max((divergence(&DivergenceSpec::ReverseKl, &q, &p)? - kl_quadrature(&p, &q)?).abs());
        let alpha = alphas[i % alphas.len()];
        match divergence(&DivergenceSpec::AlphaRenyi { alpha }, &q, &p) {
            Ok(v) => ar1 = ar1.max((v - alpha_renyi_quadrature(&q, &p, alpha)?).abs()),
            Err(crate::error::FedGviError::AlphaBlendNotPositiveDefinite { .. }) => {}
            Err(e) => return Err(e),
        }
        let (qm, pm) = (q.to_moment()?, p.to_moment()?);
        let geo = fisher_rao_geodesic(
            qm.mean[0],
            qm.covariance.get(0, 0).sqrt(),
            pm.mean[0],
            pm.covariance.get(0, 0).sqrt(),
        );
        fr = fr.max((fisher_rao_1d(&qm, &pm)? - geo).abs());
    }
    let (mut kl2, mut ar2) = (0.0f64, 0.0f64);
    for i in 0..4 {
        let (q, p) = (random_bivariate(&mut rng)?, random_bivariate(&mut rng)?);
        kl2 = kl2.max((divergence(&DivergenceSpec::Kl, &q, &p)? - kl_quadrature(&q, &p)?).abs());
        let alpha = [0.5, 1.5][i % 2];
        if let Ok(v) = divergence(&DivergenceSpec::AlphaRenyi { alpha }, &q, &p) {
            ar2 = ar2.max((v - alpha_renyi_quadrature(&q, &p, alpha)?).abs());
        }
    }
    let mut el1 = 0.0f64;
    for _ in 0..5 {
        let q = random_univariate(&mut rng)?;
        let data: Vec<Datum> = (0..4).map(|_| Datum::point(rng.random_range(-3.0..3.0))).collect();
        for (_, spec) in loss_specs(rng.random_range(0.6..1.5), 1) {
            let v = expected_loss(&spec, &q, &data, &MonteCarlo::default())?;
            el1 = el1.max((v - quadrature_expected_loss(&spec, &q, &data)?).abs());
        }
    }
    let mut el2 = 0.0f64;
    for _ in 0..2 {
        let q = random_bivariate(&mut rng)?;
        let data: Vec<Datum> = (0..3)
            .map(|_| Datum::labelled(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)], 0.0))
            .collect();
        for (_, spec) in loss_specs(1.0, 2) {
            let v = expected_loss(&spec, &q, &data, &MonteCarlo::default())?;
            el2 = el2.max((v - quadrature_expected_loss(&spec, &q, &data)?).abs());
        }
    }
    // ∫ N(x; 0, σ²)^{1+β} dx for the beta loss
    let mut integral: f64 = 0.0;
    for &(sigma, power) in &[(1.0, 1.5), (0.7, 2.0), (2.0, 1.3)] {
        let xs = linspace(-30.0 * sigma, 30.0 * sigma, 60_001);
        let h = xs[1] - xs[0];
        let f = |x: f64| {
            ((-x * x / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt())
                .powf(power)
        };
        let quad: f64 = xs.iter().map(|&x| f(x)).sum::<f64>() * h;
        integral = integral.max((density_power_integral(sigma, 1, power) - quad).abs());
    }
    Ok(vec![
        Check::below("kl_univariate", kl1, 1e-8, "closed form vs quadrature"),
        Check::below("reverse_kl_univariate", rkl1, 1e-8, "closed form vs quadrature"),
        Check::below("alpha_renyi_univariate", ar1, 1e-8, "closed form vs quadrature"),
        Check::below("fisher_rao_geodesic", fr, 1e-6, "closed form vs geodesic length"),
        Check::below("kl_bivariate", kl2, 1e-6, "closed form vs tensor-grid quadrature"),
        Check::below("alpha_renyi_bivariate", ar2, 1e-6, "closed form vs tensor-grid quadrature"),
        Check::below("expected_loss_univariate", el1, 1e-8, "closed form vs quadrature"),
        Check::below("expected_loss_bivariate", el2, 1e-6, "closed form vs tensor-grid quadrature"),
        Check::below("density_power_integral", integral, 1e-8, "closed form vs quadrature"),
    ])
}

/// The full suite under `cfg`.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for m in [1, 3, 5] {
        out.extend(gbi_recovery(cfg, m)?);
    }
    for m in [2, 5] {
        out.push(geometric_convergence(cfg, m)?);
    }
    out.extend(opinion_pool(cfg, cfg.clients, 10)?);
    out.extend(fixed_point_stationarity(cfg, cfg.clients)?);
    out.extend(conjugate_certification(cfg.seed, 50)?);
    out.extend(cavity_necessity(cfg)?);
    out.extend(closed_form_checks(cfg.seed, 20)?);
    Ok(out)
}
