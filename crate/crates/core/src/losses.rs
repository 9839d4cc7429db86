//! Per-datum losses, their expectations under Gaussian `q`, and the quadratic
//! coefficients of the kernel-weighted score-matching loss.
//!
//! Losses are sums over data. Expectations use closed forms for the Gaussian
//! location model and seeded antithetic Monte Carlo otherwise.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedGviError, Result};
use crate::exp_family::{MomentGaussian, NatGaussian};
use crate::linalg::SymMat;
use crate::variational::{flat_gradient, VariationalParams};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `x ~ N(θ, σ² I)` with `θ ∈ R^dim`.
    GaussianLocation {
        sigma: f64,
        #[serde(default = "one")]
        dim: usize,
    },
    /// `y ~ Ber(sigmoid(θᵀ[1, x]))`.
    BernoulliLogit { features: usize },
    /// `y ~ Cat(softmax(W [1, x]))`, `θ` holds the rows of `W`.
    SoftmaxLinear { features: usize, classes: usize },
}

impl ModelSpec {
    pub fn param_dim(&self) -> usize {
        match *self {
            ModelSpec::GaussianLocation { dim, .. } => dim,
            ModelSpec::BernoulliLogit { features } => features + 1,
            ModelSpec::SoftmaxLinear { features, classes } => classes * (features + 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelSpec::GaussianLocation { sigma, dim } => {
                if !(sigma > 0.0 && sigma.is_finite()) || dim == 0 {
                    return Err(FedGviError::InvalidParameter(format!(
                        "gaussian location needs sigma > 0 and dim >= 1 (sigma = {sigma}, dim = {dim})"
                    )));
                }
            }
            ModelSpec::BernoulliLogit { .. } => {}
            ModelSpec::SoftmaxLinear { classes, .. } => {
                if classes < 2 {
                    return Err(FedGviError::InvalidParameter(
                        "softmax model needs at least two classes".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One observation: features `x` and label `y`. The location model reads only `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Datum {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Datum {
    pub fn point(x: f64) -> Self {
        Datum { x: vec![x], y: 0.0 }
    }

    pub fn labelled(x: Vec<f64>, y: f64) -> Self {
        Datum { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightKernel {
    Constant { beta_w: f64 },
    SquaredExponential { beta_w: f64, c: f64 },
    InverseMultiquadric { beta_w: f64, c: f64, a: f64 },
}

impl WeightKernel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            WeightKernel::Constant { beta_w } => beta_w > 0.0,
            WeightKernel::SquaredExponential { beta_w, c } => beta_w > 0.0 && c > 0.0,
            WeightKernel::InverseMultiquadric { beta_w, c, a } => {
                beta_w > 0.0 && c > 0.0 && a > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(FedGviError::InvalidParameter(format!(
                "kernel parameters must be positive: {self:?}"
            )))
        }
    }

    /// Weight and its spatial gradient at `x` for a kernel centred at `centre`.
    pub fn eval(&self, x: &[f64], centre: &[f64]) -> (f64, DVector<f64>) {
        let r = DVector::from_fn(x.len(), |j, _| x[j] - centre.get(j).copied().unwrap_or(0.0));
        let r2 = r.norm_squared();
        match *self {
            WeightKernel::Constant { beta_w } => (beta_w, DVector::zeros(x.len())),
            WeightKernel::SquaredExponential { beta_w, c } => {
                let w = beta_w * (-r2 / (2.0 * c * c)).exp();
                (w, &r * (-w / (c * c)))
            }
            WeightKernel::InverseMultiquadric { beta_w, c, a } => {
                let u = r2 / (2.0 * a * c * c);
                let w = beta_w * (1.0 + u).powf(-a);
                (w, &r * (-w / (c * c * (1.0 + u))))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    Nll,
    Beta { beta: f64 },
    Gamma { gamma: f64 },
    ScoreMatching { kernel: WeightKernel },
    Gce { delta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    pub model: ModelSpec,
    /// Kernel centre for score matching; the clients set it to the cavity mean.
    #[serde(skip)]
    pub centre: Option<Vec<f64>>,
}

impl LossSpec {
    pub fn new(kind: LossKind, model: ModelSpec) -> Self {
        LossSpec {
            kind,
            model,
            centre: None,
        }
    }

    pub fn centred(&self, centre: &DVector<f64>) -> Self {
        LossSpec {
            centre: Some(centre.iter().copied().collect()),
            ..self.clone()
        }
    }

    fn centre(&self) -> Vec<f64> {
        self.centre
            .clone()
            .unwrap_or_else(|| vec![0.0; self.model.param_dim()])
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(FedGviError::InvalidParameter(msg));
        match self.kind {
            LossKind::Nll => {}
            LossKind::Beta { beta } if !(beta > 0.0 && beta.is_finite()) => {
                return bad(format!("beta loss needs beta > 0, got {beta}"))
            }
            LossKind::Gamma { gamma } if !(gamma > 1.0 && gamma.is_finite()) => {
                return bad(format!("gamma loss needs gamma > 1, got {gamma}"))
            }
            LossKind::Gce { delta } if !(delta > 0.0 && delta <= 1.0) => {
                return bad(format!("generalised cross-entropy needs delta in (0, 1], got {delta}"))
            }
            LossKind::ScoreMatching { kernel } => kernel.validate()?,
            _ => {}
        }
        match (&self.kind, &self.model) {
            (LossKind::ScoreMatching { .. }, ModelSpec::GaussianLocation { .. }) => Ok(()),
            (LossKind::ScoreMatching { .. }, _) => Err(FedGviError::Unsupported(
                "score matching needs a density differentiable in the data".into(),
            )),
            (LossKind::Gce { .. }, ModelSpec::GaussianLocation { .. }) => Err(
                FedGviError::Unsupported("generalised cross-entropy needs a discrete model".into()),
            ),
            _ => Ok(()),
        }
    }

    /// True when the expectation under a Gaussian has a closed form.
    pub fn has_closed_form(&self) -> bool {
        matches!(self.model, ModelSpec::GaussianLocation { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarlo {
    pub seed: u64,
    pub n_samples: usize,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        MonteCarlo {
            seed: 0,
            n_samples: 256,
        }
    }
}

/// `∫ N(x; θ, σ²I)^power dx = (2πσ²)^{d(1−power)/2} power^{−d/2}`.
pub fn density_power_integral(sigma: f64, dim: usize, power: f64) -> f64 {
    let d = dim as f64;
    ((1.0 - power) * 0.5 * d * (LN_2PI + 2.0 * sigma.ln())).exp() * power.powf(-0.5 * d)
}

fn check_theta(spec: &LossSpec, theta: &DVector<f64>) -> Result<()> {
    let d = spec.model.param_dim();
    if theta.len() != d {
        return Err(FedGviError::DimensionMismatch {
            expected: d,
            found: theta.len(),
        });
    }
    Ok(())
}

fn check_datum(spec: &LossSpec, datum: &Datum) -> Result<()> {
    let expected = match spec.model {
        ModelSpec::GaussianLocation { dim, .. } => dim,
        ModelSpec::BernoulliLogit { features } | ModelSpec::SoftmaxLinear { features, .. } => {
            features
        }
    };
    if datum.x.len() != expected {
        return Err(FedGviError::DimensionMismatch {
            expected,
            found: datum.x.len(),
        });
    }
    Ok(())
}

fn gamma_constant(gamma: f64, integral: f64) -> f64 {
    gamma / (gamma - 1.0) / integral.powf((gamma - 1.0) / gamma)
}

/// Loss and its gradient in `θ` for the location model.
fn location_loss(
    kind: &LossKind,
    sigma: f64,
    centre: &[f64],
    theta: &DVector<f64>,
    x: &[f64],
) -> Result<(f64, DVector<f64>)> {
    let d = theta.len();
    let df = d as f64;
    let s2 = sigma * sigma;
    let r = DVector::from_fn(d, |j, _| theta[j] - x[j]);
    let r2 = r.norm_squared();
    let log_p = -0.5 * r2 / s2 - 0.5 * df * (LN_2PI + 2.0 * sigma.ln());
    Ok(match *kind {
        LossKind::Nll => (-log_p, &r / s2),
        LossKind::Beta { beta } => {
            let pb = (beta * log_p).exp();
            let integral = density_power_integral(sigma, d, 1.0 + beta);
            (-pb / beta + integral / (1.0 + beta), &r * (pb / s2))
        }
        LossKind::Gamma { gamma } => {
            let c = gamma_constant(gamma, density_power_integral(sigma, d, gamma));
            let pg = ((gamma - 1.0) * log_p).exp();
            (-c * pg, &r * (c * pg * (gamma - 1.0) / s2))
        }
        LossKind::ScoreMatching { kernel } => {
            let (w, dw) = kernel.eval(x, centre);
            let s4 = s2 * s2;
            let v = w * w * r2 / s4 + 2.0 * (2.0 * w * dw.dot(&r) - df * w * w) / s2;
            let g = &r * (2.0 * w * w / s4) + &dw * (4.0 * w / s2);
            (v, g)
        }
        LossKind::Gce { .. } => {
            return Err(FedGviError::Unsupported(
                "generalised cross-entropy needs a discrete model".into(),
            ))
        }
    })
}

/// Class logits and the feature vector `[1, x]`.
fn logits(model: &ModelSpec, theta: &DVector<f64>, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut xt = Vec::with_capacity(x.len() + 1);
    xt.push(1.0);
    xt.extend_from_slice(x);
    let z = match *model {
        ModelSpec::BernoulliLogit { .. } => {
            let a: f64 = xt.iter().zip(theta.iter()).map(|(u, v)| u * v).sum();
            vec![0.0, a]
        }
        ModelSpec::SoftmaxLinear { classes, features } => (0..classes)
            .map(|c| {
                let row = theta.rows(c * (features + 1), features + 1);
                xt.iter().zip(row.iter()).map(|(u, v)| u * v).sum()
            })
            .collect(),
        ModelSpec::GaussianLocation { .. } => unreachable!("discrete models only"),
    };
    (z, xt)
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn class_index(model: &ModelSpec, y: f64) -> Result<usize> {
    let classes = match *model {
        ModelSpec::BernoulliLogit { .. } => 2,
        ModelSpec::SoftmaxLinear { classes, .. } => classes,
        ModelSpec::GaussianLocation { .. } => unreachable!("discrete models only"),
    };
    if y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes {
        Ok(y as usize)
    } else {
        Err(FedGviError::InvalidParameter(format!(
            "label {y} is not a class index below {classes}"
        )))
    }
}

/// Loss at label `y` given class log-probabilities. Fills `h` with
/// `h_c = p_c ∂L/∂p_c`, so that `∂L/∂z_k = h_k − p_k Σ_c h_c`.
fn class_loss(kind: &LossKind, logp: &[f64], y: usize, h: &mut [f64]) -> Result<f64> {
    let k = logp.len();
    h.iter_mut().for_each(|v| *v = 0.0);
    Ok(match *kind {
        LossKind::Nll => {
            h[y] = -1.0;
            -logp[y]
        }
        LossKind::Beta { beta } => {
            for c in 0..k {
                h[c] = ((1.0 + beta) * logp[c]).exp();
            }
            let integral: f64 = h.iter().sum();
            let py_b = (beta * logp[y]).exp();
            h[y] -= py_b;
            -py_b / beta + integral / (1.0 + beta)
        }
        LossKind::Gamma { gamma } => {
            let s: f64 = logp.iter().map(|l| (gamma * l).exp()).sum();
            let e = (gamma - 1.0) / gamma;
            let py = ((gamma - 1.0) * logp[y]).exp();
            for c in 0..k {
                h[c] = gamma * py * s.powf(-e - 1.0) * (gamma * logp[c]).exp();
            }
            h[y] -= gamma * py * s.powf(-e);
            -gamma / (gamma - 1.0) * py * s.powf(-e)
        }
        LossKind::Gce { delta } => {
            let pd = (delta * logp[y]).exp();
            h[y] = -pd;
            (1.0 - pd) / delta
        }
        LossKind::ScoreMatching { .. } => {
            return Err(FedGviError::Unsupported(
                "score matching needs a density differentiable in the data".into(),
            ))
        }
    })
}

/// Binary logit loss at activation `a = x̃ᵀθ`: value and `∂L/∂a`.
fn binary_loss(kind: &LossKind, a: f64, y: usize) -> Result<(f64, f64)> {
    let e = (-a.abs()).exp();
    let lse = a.max(0.0) + e.ln_1p();
    let p1 = if a >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    let logp = [-lse, a - lse];
    let mut h = [0.0; 2];
    let v = class_loss(kind, &logp, y, &mut h)?;
    Ok((v, h[1] - p1 * (h[0] + h[1])))
}

/// Loss and its gradient in `θ` for the discrete models.
fn discrete_loss(
    kind: &LossKind,
    model: &ModelSpec,
    theta: &DVector<f64>,
    datum: &Datum,
) -> Result<(f64, DVector<f64>)> {
    let y = class_index(model, datum.y)?;
    let (z, xt) = logits(model, theta, &datum.x);
    let mut grad = DVector::zeros(theta.len());
    match *model {
        ModelSpec::BernoulliLogit { .. } => {
            let (v, da) = binary_loss(kind, z[1], y)?;
            for (j, xv) in xt.iter().enumerate() {
                grad[j] = da * xv;
            }
            Ok((v, grad))
        }
        ModelSpec::SoftmaxLinear { features, .. } => {
            let logp = log_softmax(&z);
            let mut h = vec![0.0; logp.len()];
            let v = class_loss(kind, &logp, y, &mut h)?;
            let hs: f64 = h.iter().sum();
            for c in 0..logp.len() {
                let dz = h[c] - logp[c].exp() * hs;
                for (j, xv) in xt.iter().enumerate() {
                    grad[c * (features + 1) + j] = dz * xv;
                }
            }
            Ok((v, grad))
        }
        ModelSpec::GaussianLocation { .. } => unreachable!(),
    }
}

/// Loss value and gradient in `θ` at one datum.
pub fn point_loss_grad(
    spec: &LossSpec,
    theta: &DVector<f64>,
    datum: &Datum,
) -> Result<(f64, DVector<f64>)> {
    spec.validate()?;
    check_theta(spec, theta)?;
    check_datum(spec, datum)?;
    match spec.model {
        ModelSpec::GaussianLocation { sigma, .. } => {
            location_loss(&spec.kind, sigma, &spec.centre(), theta, &datum.x)
        }
        _ => discrete_loss(&spec.kind, &spec.model, theta, datum),
    }
}

pub fn point_loss(spec: &LossSpec, theta: &DVector<f64>, datum: &Datum) -> Result<f64> {
    Ok(point_loss_grad(spec, theta, datum)?.0)
}

/// `E[exp(power · log N(x; θ, σ²I))]` for `θ ~ N(mean, cov)`.
fn location_power_expectation(
    m: &MomentGaussian,
    sigma: f64,
    power: f64,
    x: &[f64],
    shifted: &SymMat,
    log_det_shifted: f64,
) -> Result<f64> {
    let d = m.dim() as f64;
    let s2 = sigma * sigma;
    let r = DVector::from_fn(m.dim(), |j, _| x[j] - m.mean[j]);
    let quad = r.dot(&shifted.solve(&r)?);
    // det(I + (power/σ²)Σ) = (power/σ²)^d det(Σ + σ²/power I)
    let log_det = d * (power / s2).ln() + log_det_shifted;
    Ok((-0.5 * power * d * (LN_2PI + 2.0 * sigma.ln()) - 0.5 * log_det - 0.5 * quad).exp())
}

fn expected_location_loss(spec: &LossSpec, sigma: f64, m: &MomentGaussian, data: &[Datum]) -> Result<f64> {
    let d = m.dim();
    let df = d as f64;
    let s2 = sigma * sigma;
    let tr = m.covariance.diag().sum();
    let sq = |x: &[f64]| -> f64 { (0..d).map(|j| (m.mean[j] - x[j]).powi(2)).sum() };
    let power_terms = |power: f64| -> Result<Vec<f64>> {
        let shifted = m.covariance.add(&SymMat::identity(d).scale(s2 / power))?;
        let ld = shifted.log_det()?;
        data.iter()
            .map(|z| location_power_expectation(m, sigma, power, &z.x, &shifted, ld))
            .collect()
    };
    Ok(match spec.kind {
        LossKind::Nll => data
            .iter()
            .map(|z| 0.5 * (sq(&z.x) + tr) / s2 + 0.5 * df * (LN_2PI + 2.0 * sigma.ln()))
            .sum(),
        LossKind::Beta { beta } => {
            let integral = density_power_integral(sigma, d, 1.0 + beta);
            power_terms(beta)?
                .iter()
                .map(|e| -e / beta + integral / (1.0 + beta))
                .sum()
        }
        LossKind::Gamma { gamma } => {
            let c = gamma_constant(gamma, density_power_integral(sigma, d, gamma));
            -c * power_terms(gamma - 1.0)?.iter().sum::<f64>()
        }
        LossKind::ScoreMatching { kernel } => {
            let centre = spec.centre();
            let s4 = s2 * s2;
            data.iter()
                .map(|z| {
                    let (w, dw) = kernel.eval(&z.x, &centre);
                    let r = DVector::from_fn(d, |j, _| m.mean[j] - z.x[j]);
                    w * w * (sq(&z.x) + tr) / s4 + 2.0 * (2.0 * w * dw.dot(&r) - df * w * w) / s2
                })
                .sum()
        }
        LossKind::Gce { .. } => unreachable!("rejected by validation"),
    })
}

/// Closed-form value and `(μ, log σ)` gradient for the location model.
fn location_loss_grad(
    spec: &LossSpec,
    sigma: f64,
    vp: &VariationalParams,
    data: &[Datum],
) -> Result<(f64, DVector<f64>)> {
    let d = vp.dim();
    let var = vp.variance();
    let s2 = sigma * sigma;
    let m = MomentGaussian::new(vp.mean.clone(), SymMat::diagonal(var.clone()))?;
    let value = expected_location_loss(spec, sigma, &m, data)?;
    let mut g_mean = DVector::zeros(d);
    let mut g_log = DVector::zeros(d);
    // E[p^power] and its derivatives for a diagonal q
    let mut power_grads = |power: f64, coef: f64| {
        let v = var.map(|s| s + s2 / power);
        let lead = -0.5 * power * d as f64 * (LN_2PI + 2.0 * sigma.ln());
        for z in data {
            let r = DVector::from_fn(d, |j, _| z.x[j] - vp.mean[j]);
            let mut log_e = lead;
            for j in 0..d {
                log_e += -0.5 * (power * v[j] / s2).ln() - r[j] * r[j] / (2.0 * v[j]);
            }
            let e = log_e.exp();
            for j in 0..d {
                g_mean[j] += coef * e * r[j] / v[j];
                g_log[j] += coef * e * (-0.5 / v[j] + r[j] * r[j] / (2.0 * v[j] * v[j])) * 2.0 * var[j];
            }
        }
    };
    match spec.kind {
        LossKind::Nll => {
            for z in data {
                for j in 0..d {
                    g_mean[j] += (vp.mean[j] - z.x[j]) / s2;
                    g_log[j] += var[j] / s2;
                }
            }
        }
        LossKind::Beta { beta } => power_grads(beta, -1.0 / beta),
        LossKind::Gamma { gamma } => {
            let c = gamma_constant(gamma, density_power_integral(sigma, d, gamma));
            power_grads(gamma - 1.0, -c)
        }
        LossKind::ScoreMatching { kernel } => {
            let centre = spec.centre();
            let s4 = s2 * s2;
            for z in data {
                let (w, dw) = kernel.eval(&z.x, &centre);
                for j in 0..d {
                    g_mean[j] += 2.0 * w * w * (vp.mean[j] - z.x[j]) / s4 + 4.0 * w * dw[j] / s2;
                    g_log[j] += 2.0 * w * w * var[j] / s4;
                }
            }
        }
        LossKind::Gce { .. } => unreachable!("rejected by validation"),
    }
    Ok((value, flat_gradient(&g_mean, &g_log)))
}

/// Antithetic standard-normal draws `ε₁, −ε₁, ε₂, −ε₂, …`.
pub fn antithetic_draws(mc: &MonteCarlo, dim: usize) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    let n = mc.n_samples.max(2);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let e = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        out.push(-&e);
        out.push(e);
        let k = out.len();
        out.swap(k - 2, k - 1);
    }
    out.truncate(n);
    out
}

/// Monte-Carlo estimate of `E_q[Σ L]` with the draws of `mc`.
pub fn expected_loss_mc(
    spec: &LossSpec,
    q: &NatGaussian,
    data: &[Datum],
    mc: &MonteCarlo,
) -> Result<f64> {
    let m = q.to_moment()?;
    let chol = m.covariance.cholesky_factor()?;
    let draws = antithetic_draws(mc, q.dim());
    let mut total = 0.0;
    for eps in &draws {
        let theta = &m.mean + &chol * eps;
        for z in data {
            total += point_loss(spec, &theta, z)?;
        }
    }
    Ok(total / draws.len() as f64)
}

/// `E_q[Σ_i L(θ, datum_i)]`, closed form for the location model.
pub fn expected_loss(
    spec: &LossSpec,
    q: &NatGaussian,
    data: &[Datum],
    mc: &MonteCarlo,
) -> Result<f64> {
    spec.validate()?;
    check_theta(spec, &DVector::zeros(q.dim()))?;
    for z in data {
        check_datum(spec, z)?;
    }
    if data.is_empty() {
        return Ok(0.0);
    }
    match spec.model {
        ModelSpec::GaussianLocation { sigma, .. } => {
            expected_location_loss(spec, sigma, &q.to_moment()?, data)
        }
        _ => expected_loss_mc(spec, q, data, mc),
    }
}

/// Value and `(μ, log σ)` gradient of `E_q[Σ L]` for mean-field `q`.
/// The Monte-Carlo path uses the reparameterisation `θ = μ + σ ⊙ ε`.
pub fn loss_grad(
    spec: &LossSpec,
    vp: &VariationalParams,
    data: &[Datum],
    mc: &MonteCarlo,
) -> Result<(f64, DVector<f64>)> {
    spec.validate()?;
    let d = vp.dim();
    check_theta(spec, &DVector::zeros(d))?;
    for z in data {
        check_datum(spec, z)?;
    }
    if data.is_empty() {
        return Ok((0.0, DVector::zeros(2 * d)));
    }
    if let ModelSpec::GaussianLocation { sigma, .. } = spec.model {
        return location_loss_grad(spec, sigma, vp, data);
    }
    let scale = vp.scale();
    let draws = antithetic_draws(mc, d);
    if let ModelSpec::BernoulliLogit { .. } = spec.model {
        return logit_loss_grad(spec, vp, &scale, &draws, data);
    }
    let mut value = 0.0;
    let mut g_mean = DVector::zeros(d);
    let mut g_log = DVector::zeros(d);
    for eps in &draws {
        let theta = &vp.mean + scale.component_mul(eps);
        for z in data {
            let (v, g) = point_loss_grad(spec, &theta, z)?;
            value += v;
            g_mean += &g;
            g_log += g.component_mul(&scale).component_mul(eps);
        }
    }
    let n = draws.len() as f64;
    Ok((value / n, flat_gradient(&(g_mean / n), &(g_log / n))))
}

/// Allocation-free Monte-Carlo path for the binary logit model.
fn logit_loss_grad(
    spec: &LossSpec,
    vp: &VariationalParams,
    scale: &DVector<f64>,
    draws: &[DVector<f64>],
    data: &[Datum],
) -> Result<(f64, DVector<f64>)> {
    let d = vp.dim();
    let labels = data
        .iter()
        .map(|z| class_index(&spec.model, z.y))
        .collect::<Result<Vec<_>>>()?;
    // augmented design, row-major
    let mut design = Vec::with_capacity(data.len() * d);
    for z in data {
        design.push(1.0);
        design.extend_from_slice(&z.x);
    }
    let mean = vp.mean.as_slice();
    let mut theta = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let mut g_mean = vec![0.0; d];
    let mut g_log = vec![0.0; d];
    let mut value = 0.0;
    for eps in draws {
        for j in 0..d {
            noise[j] = scale[j] * eps[j];
            theta[j] = mean[j] + noise[j];
        }
        for (row, &y) in design.chunks_exact(d).zip(&labels) {
            let a: f64 = row.iter().zip(&theta).map(|(u, v)| u * v).sum();
            let (v, da) = binary_loss(&spec.kind, a, y)?;
            value += v;
            for j in 0..d {
                let gj = da * row[j];
                g_mean[j] += gj;
                g_log[j] += gj * noise[j];
            }
        }
    }
    let n = draws.len() as f64;
    Ok((
        value / n,
        flat_gradient(
            &DVector::from_iterator(d, g_mean.iter().map(|v| v / n)),
            &DVector::from_iterator(d, g_log.iter().map(|v| v / n)),
        ),
    ))
}

/// Mean-form quadratic coefficients `(B, b)` of the score-matching loss on the
/// location model: `(1/n) Σ_i L(θ, x_i) = θᵀBθ + θᵀb + const`.
pub fn score_matching_coeffs(
    spec: &LossSpec,
    data: &[Datum],
    centre: &DVector<f64>,
) -> Result<(SymMat, DVector<f64>)> {
    spec.validate()?;
    let (LossKind::ScoreMatching { kernel }, ModelSpec::GaussianLocation { sigma, dim }) =
        (spec.kind, &spec.model)
    else {
        return Err(FedGviError::Unsupported(
            "score-matching coefficients need the gaussian location model".into(),
        ));
    };
    let d = *dim;
    if data.is_empty() {
        return Ok((SymMat::zeros(d, true), DVector::zeros(d)));
    }
    let c: Vec<f64> = centre.iter().copied().collect();
    let s2 = sigma * sigma;
    let s4 = s2 * s2;
    let mut bq = 0.0;
    let mut bl = DVector::zeros(d);
    for z in data {
        check_datum(spec, z)?;
        let (w, dw) = kernel.eval(&z.x, &c);
        bq += w * w / s4;
        for j in 0..d {
            bl[j] += -2.0 * w * w * z.x[j] / s4 + 4.0 * w * dw[j] / s2;
        }
    }
    let n = data.len() as f64;
    Ok((SymMat::diagonal(DVector::from_element(d, bq / n)), bl / n))
}
