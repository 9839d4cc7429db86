//! Client side of a federated round: cavity, local optimisation, damped update.

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::divergences::{divergence, divergence_grad, DivergenceSpec};
use crate::error::{FedGviError, Result};
use crate::exp_family::NatGaussian;
use crate::linalg::SymMat;
use crate::losses::{
    loss_grad, score_matching_coeffs, Datum, LossKind, LossSpec, ModelSpec,
    MonteCarlo,
};
use crate::optim::{minimize, OptimSettings};
use crate::variational::VariationalParams;
use crate::wire::RoundMessage;

/// Smallest cavity precision eigenvalue accepted without repair.
pub const CAVITY_EIGEN_FLOOR: f64 = 1e-8;
const MAX_REPAIR_HALVINGS: usize = 10;

/// Quadratic site `λ(θ) = ½θᵀΔΛθ − Δηᵀθ`, constant dropped; may be indefinite.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteFactor {
    pub delta_precision: SymMat,
    pub delta_shift: DVector<f64>,
    pub round_updated: u64,
}

impl SiteFactor {
    pub fn zero(dim: usize, diagonal: bool) -> Self {
        SiteFactor {
            delta_precision: SymMat::zeros(dim, diagonal),
            delta_shift: DVector::zeros(dim),
            round_updated: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.delta_shift.len()
    }

    /// `exp{−λ(θ)}` as a factor.
    pub fn as_factor(&self) -> NatGaussian {
        NatGaussian::new(self.delta_precision.clone(), self.delta_shift.clone())
            .expect("site dimensions are consistent by construction")
    }

    pub fn add(&self, other: &SiteFactor) -> Result<SiteFactor> {
        Ok(SiteFactor {
            delta_precision: self.delta_precision.add(&other.delta_precision)?,
            delta_shift: &self.delta_shift + &other.delta_shift,
            round_updated: self.round_updated.max(other.round_updated),
        })
    }

    pub fn sub(&self, other: &SiteFactor) -> Result<SiteFactor> {
        Ok(SiteFactor {
            delta_precision: self.delta_precision.sub(&other.delta_precision)?,
            delta_shift: &self.delta_shift - &other.delta_shift,
            round_updated: self.round_updated.max(other.round_updated),
        })
    }

    pub fn scale(&self, s: f64) -> SiteFactor {
        SiteFactor {
            delta_precision: self.delta_precision.scale(s),
            delta_shift: &self.delta_shift * s,
            round_updated: self.round_updated,
        }
    }

    /// Sup-norm over `(ΔΛ, Δη)`.
    pub fn sup_norm(&self) -> f64 {
        self.delta_precision.max_abs().max(self.delta_shift.amax())
    }

    pub fn is_zero(&self) -> bool {
        self.sup_norm() == 0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairPolicy {
    /// Halve the most recent site delta until the cavity is proper.
    #[default]
    Halve,
    Fail,
}

/// Local prior used by the client.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CavityMode {
    #[default]
    Cavity,
    /// Uses the previous server posterior instead of the cavity.
    PreviousPosterior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub loss: LossSpec,
    pub divergence: DivergenceSpec,
    pub damping: f64,
    #[serde(default)]
    pub optimiser: OptimSettings,
    #[serde(default)]
    pub mc: MonteCarlo,
    #[serde(default)]
    pub repair: RepairPolicy,
    #[serde(default)]
    pub cavity_mode: CavityMode,
}

impl ClientConfig {
    pub fn new(loss: LossSpec, divergence: DivergenceSpec, damping: f64) -> Self {
        ClientConfig {
            loss,
            divergence,
            damping,
            optimiser: OptimSettings::default(),
            mc: MonteCarlo::default(),
            repair: RepairPolicy::default(),
            cavity_mode: CavityMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.divergence.validate()?;
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(FedGviError::InvalidParameter(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: u32,
    pub data: Vec<Datum>,
    pub site: SiteFactor,
    pub config: ClientConfig,
    /// Most recent delta added to the site, the target of cavity repair.
    pub last_delta: Option<SiteFactor>,
}

impl ClientState {
    pub fn new(client_id: u32, data: Vec<Datum>, config: ClientConfig, diagonal: bool) -> Result<Self> {
        config.validate()?;
        let dim = config.loss.model.param_dim();
        Ok(ClientState {
            client_id,
            data,
            site: SiteFactor::zero(dim, diagonal),
            config,
            last_delta: None,
        })
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }
}

/// `q_s / exp{−λ}`; may be improper.
pub fn compute_cavity(q_s: &NatGaussian, site: &SiteFactor) -> Result<NatGaussian> {
    q_s.divide(&site.as_factor())
}

fn cavity_is_usable(c: &NatGaussian) -> bool {
    c.is_proper() && c.precision().min_eigenvalue() >= CAVITY_EIGEN_FLOOR
}

/// Computes the cavity, halving the latest site delta while it is improper.
/// Returns the cavity and the part of the site that was removed.
fn repaired_cavity(q_s: &NatGaussian, state: &mut ClientState) -> Result<(NatGaussian, SiteFactor)> {
    let mut removed = SiteFactor::zero(state.site.dim(), state.site.delta_precision.is_diagonal());
    let mut cavity = compute_cavity(q_s, &state.site)?;
    let mut halvings = 0;
    while !cavity_is_usable(&cavity) {
        let latest = match (&state.last_delta, state.config.repair) {
            (Some(d), RepairPolicy::Halve) if halvings < MAX_REPAIR_HALVINGS => d.clone(),
            _ => {
                return Err(FedGviError::ImproperCavity {
                    client_id: state.client_id,
                })
            }
        };
        let half = latest.scale(0.5);
        state.site = state.site.sub(&half)?;
        removed = removed.add(&half)?;
        state.last_delta = Some(half);
        halvings += 1;
        cavity = compute_cavity(q_s, &state.site)?;
    }
    if halvings > 0 {
        warn!(
            "client {}: improper cavity repaired by {} halving(s) of the latest site delta",
            state.client_id, halvings
        );
    }
    Ok((cavity, removed))
}

/// Conjugate update for NLL or score matching on the location model with a
/// (weighted) KL divergence: `q ∝ ρ · exp{−w Σ L}`, kernels centred at the
/// cavity mean. `None` when the loss has no conjugate form.
pub fn conjugate_update(
    cavity: &NatGaussian,
    loss: &LossSpec,
    data: &[Datum],
    w: f64,
) -> Result<Option<NatGaussian>> {
    let loss = &loss.centred(&cavity.mean()?);
    let ModelSpec::GaussianLocation { sigma, dim } = loss.model else {
        return Ok(None);
    };
    let n = data.len() as f64;
    let (a, b) = match loss.kind {
        LossKind::Nll => {
            let s2 = sigma * sigma;
            let mut sum = DVector::zeros(dim);
            for z in data {
                sum += DVector::from_column_slice(&z.x);
            }
            (SymMat::identity(dim).scale(w * n / s2), sum * (w / s2))
        }
        LossKind::ScoreMatching { .. } => {
            let (bq, bl) = score_matching_coeffs(loss, data, &cavity.mean()?)?;
            (bq.scale(2.0 * w * n), bl * (-w * n))
        }
        _ => return Ok(None),
    };
    let site = NatGaussian::new(a, b)?;
    Ok(Some(cavity.multiply(&site)?))
}

/// Whether `local_optimize` takes the closed-form path for this configuration.
pub fn is_conjugate(config: &ClientConfig) -> bool {
    config.divergence.kl_weight().is_some()
        && matches!(config.loss.model, ModelSpec::GaussianLocation { .. })
        && matches!(config.loss.kind, LossKind::Nll | LossKind::ScoreMatching { .. })
}

/// Objective `E_q[Σ L] + D(q : ρ)` and its gradient in flat `(μ, log σ)`.
pub fn local_objective(
    vp: &VariationalParams,
    prior: &NatGaussian,
    loss: &LossSpec,
    div: &DivergenceSpec,
    data: &[Datum],
    mc: &MonteCarlo,
) -> Result<(f64, DVector<f64>)> {
    let (l, gl) = loss_grad(loss, vp, data, mc)?;
    let q = vp.to_nat()?;
    let dv = divergence(div, &q, prior)?;
    let gd = divergence_grad(div, vp, prior)?;
    Ok((l + dv, gl + gd))
}

/// Local GVI step: `argmin_q E_q[Σ L] + D(q : ρ)`.
///
/// `warm_start` seeds the iterative path; if the gradient there is already
/// below tolerance it is returned unchanged.
pub fn local_optimize(
    prior: &NatGaussian,
    config: &ClientConfig,
    data: &[Datum],
    warm_start: &NatGaussian,
) -> Result<NatGaussian> {
    if !prior.is_proper() {
        return Err(FedGviError::NotPositiveDefinite);
    }
    if data.is_empty() {
        return Ok(prior.clone());
    }
    let loss = config.loss.centred(&prior.mean()?);
    if let (Some(w), true) = (config.divergence.kl_weight(), is_conjugate(config)) {
        if let Some(q) = conjugate_update(prior, &config.loss, data, w)? {
            if !q.is_proper() {
                return Err(FedGviError::NotPositiveDefinite);
            }
            return Ok(q);
        }
    }
    let start = VariationalParams::from_nat(warm_start)?;
    let objective = |x: &DVector<f64>| {
        let vp = VariationalParams::from_flat(x);
        local_objective(&vp, prior, &loss, &config.divergence, data, &config.mc)
    };
    let (_, g0) = objective(&start.to_flat())?;
    if g0.norm() < config.optimiser.tolerance && warm_start.is_diagonal() {
        return Ok(warm_start.clone());
    }
    let res = minimize(objective, start.to_flat(), &config.optimiser)?;
    log::debug!(
        "local optimisation: {} iterations, gradient norm {:.2e}",
        res.iterations,
        res.grad_norm
    );
    VariationalParams::from_flat(&res.x).to_nat()
}

/// Damped update `t = −τ log(q_m / q_s)` as a site delta.
pub fn make_update(q_m: &NatGaussian, q_s_prev: &NatGaussian, tau: f64) -> Result<SiteFactor> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(FedGviError::InvalidParameter(format!(
            "damping must lie in (0, 1], got {tau}"
        )));
    }
    Ok(SiteFactor {
        delta_precision: q_m.precision().sub(q_s_prev.precision())?.scale(tau),
        delta_shift: (q_m.shift() - q_s_prev.shift()) * tau,
        round_updated: 0,
    })
}

/// Result of one client step.
#[derive(Clone, Debug)]
pub struct ClientStep {
    /// Update sent to the server: the site change this round.
    pub delta: SiteFactor,
    pub posterior: NatGaussian,
    pub state: ClientState,
}

impl ClientStep {
    pub fn message(&self) -> RoundMessage {
        RoundMessage::update(self.state.client_id, self.delta.round_updated, &self.delta)
    }
}

/// One client round: cavity, local optimisation, damped update, site
/// accumulation. Pure in its inputs.
pub fn client_step(q_s: &NatGaussian, state: &ClientState, round: u64) -> Result<ClientStep> {
    let mut next = state.clone();
    let (local_prior, removed) = match state.config.cavity_mode {
        CavityMode::Cavity => repaired_cavity(q_s, &mut next)?,
        CavityMode::PreviousPosterior => (
            q_s.clone(),
            SiteFactor::zero(state.site.dim(), state.site.delta_precision.is_diagonal()),
        ),
    };
    let q_m = local_optimize(&local_prior, &state.config, &state.data, q_s)?;
    if log::log_enabled!(log::Level::Trace) {
        let m = q_m.to_moment()?;
        log::trace!("client {} local mean {:?} sd {:?}", state.client_id, m.mean.as_slice(), m.std_devs().as_slice());
    }
    let mut t = make_update(&q_m, q_s, state.config.damping)?;
    t.round_updated = round;
    next.site = next.site.add(&t)?;
    next.site.round_updated = round;
    next.last_delta = Some(t.clone());
    let mut delta = t.sub(&removed)?;
    delta.round_updated = round;
    Ok(ClientStep {
        delta,
        posterior: q_m,
        state: next,
    })
}

/// `client_step` returning the wire message and the new state.
pub fn client_round(q_s: &NatGaussian, state: &ClientState, round: u64) -> Result<(RoundMessage, ClientState)> {
    let step = client_step(q_s, state, round)?;
    Ok((step.message(), step.state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::WeightKernel;

    fn loc_config(kind: LossKind, div: DivergenceSpec, tau: f64) -> ClientConfig {
        ClientConfig::new(
            LossSpec::new(kind, ModelSpec::GaussianLocation { sigma: 1.0, dim: 1 }),
            div,
            tau,
        )
    }

    fn uni(m: f64, v: f64) -> NatGaussian {
        NatGaussian::univariate(m, v).unwrap()
    }

    #[test]
    fn zero_site_cavity_is_server_posterior() {
        let q = uni(0.3, 0.7);
        let c = compute_cavity(&q, &SiteFactor::zero(1, true)).unwrap();
        assert!(c.same_distribution(&q, 0.0));
    }

    #[test]
    fn improper_cavity_is_returned_not_rejected() {
        let q = uni(0.0, 1.0);
        let mut site = SiteFactor::zero(1, true);
        site.delta_precision = SymMat::diagonal(DVector::from_vec(vec![3.0]));
        let c = compute_cavity(&q, &site).unwrap();
        assert!(!c.is_proper());
        assert_eq!(c.precision().get(0, 0), -2.0);
    }

    #[test]
    fn conjugate_nll_single_datum() {
        // prior N(0,1), x = 2, σ = 1 gives N(1, 0.5)
        let cfg = loc_config(LossKind::Nll, DivergenceSpec::WeightedKl { w: 1.0 }, 1.0);
        let prior = uni(0.0, 1.0);
        let q = local_optimize(&prior, &cfg, &[Datum::point(2.0)], &prior).unwrap();
        let m = q.to_moment().unwrap();
        assert!((m.mean[0] - 1.0).abs() < 1e-14);
        assert!((m.covariance.get(0, 0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn conjugate_matches_quadrature_posterior() {
        let cfg = loc_config(LossKind::Nll, DivergenceSpec::Kl, 1.0);
        let prior = uni(0.5, 2.0);
        let data: Vec<Datum> = [1.0, -0.3, 2.2].iter().map(|&x| Datum::point(x)).collect();
        let q = local_optimize(&prior, &cfg, &data, &prior).unwrap().to_moment().unwrap();
        // moments of prior × likelihood by trapezoid quadrature
        let n = 200_001;
        let (a, b) = (-20.0, 20.0);
        let h = (b - a) / (n - 1) as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let t = a + i as f64 * h;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let logd = -(t - 0.5f64).powi(2) / 4.0
                - data.iter().map(|d| 0.5 * (t - d.x[0]).powi(2)).sum::<f64>();
            let f = w * logd.exp();
            z += f;
            m1 += f * t;
            m2 += f * t * t;
        }
        let mean = m1 / z;
        let var = m2 / z - mean * mean;
        assert!((q.mean[0] - mean).abs() < 1e-9);
        assert!((q.covariance.get(0, 0) - var).abs() < 1e-9);
    }

    #[test]
    fn empty_data_returns_prior() {
        let cfg = loc_config(LossKind::Beta { beta: 0.5 }, DivergenceSpec::Kl, 1.0);
        let prior = uni(0.2, 0.9);
        let q = local_optimize(&prior, &cfg, &[], &uni(3.0, 1.0)).unwrap();
        assert!(q.same_distribution(&prior, 0.0));
    }

    #[test]
    fn score_matching_conjugate_equals_iterative() {
        let kernel = WeightKernel::Constant { beta_w: 0.8 };
        let conj = loc_config(
            LossKind::ScoreMatching { kernel },
            DivergenceSpec::WeightedKl { w: 0.7 },
            1.0,
        );
        let prior = uni(0.1, 1.5);
        let data: Vec<Datum> = [0.4, -1.1, 2.5, 0.9].iter().map(|&x| Datum::point(x)).collect();
        let qc = local_optimize(&prior, &conj, &data, &prior).unwrap();
        // iterative path on the same objective
        let loss = conj.loss.centred(&prior.mean().unwrap());
        let res = minimize(
            |x| {
                let vp = VariationalParams::from_flat(x);
                local_objective(&vp, &prior, &loss, &conj.divergence, &data, &conj.mc)
            },
            VariationalParams::from_nat(&prior).unwrap().to_flat(),
            &OptimSettings::default(),
        )
        .unwrap();
        let vi = VariationalParams::from_flat(&res.x);
        let vc = VariationalParams::from_nat(&qc).unwrap();
        assert!((vi.mean[0] - vc.mean[0]).abs() < 1e-6);
        assert!((vi.scale()[0] - vc.scale()[0]).abs() < 1e-6);
    }

    #[test]
    fn update_properties() {
        let qs = uni(0.0, 1.0);
        let qm = uni(1.0, 0.5);
        assert!(make_update(&qs, &qs, 0.7).unwrap().is_zero());
        let full = make_update(&qm, &qs, 1.0).unwrap();
        let half = make_update(&qm, &qs, 0.5).unwrap();
        assert_eq!(half.delta_precision, full.delta_precision.scale(0.5));
        assert_eq!(half.delta_shift, &full.delta_shift * 0.5);
        let back = qs.multiply(&full.as_factor()).unwrap();
        assert!(back.same_distribution(&qm, 1e-15));
        assert!(make_update(&qm, &qs, 0.0).is_err());
    }

    #[test]
    fn single_client_exact_bayes_and_fixed_point() {
        let cfg = loc_config(LossKind::Nll, DivergenceSpec::Kl, 1.0);
        let prior = uni(0.0, 1.0);
        let data: Vec<Datum> = [1.0, 3.0].iter().map(|&x| Datum::point(x)).collect();
        let state = ClientState::new(0, data, cfg, true).unwrap();
        let s1 = client_step(&prior, &state, 1).unwrap();
        assert_eq!(s1.delta.round_updated, 1);
        let q1 = prior.multiply(&s1.delta.as_factor()).unwrap();
        let m = q1.to_moment().unwrap();
        assert!((m.mean[0] - 4.0 / 3.0).abs() < 1e-14);
        assert!((m.covariance.get(0, 0) - 1.0 / 3.0).abs() < 1e-14);
        let s2 = client_step(&q1, &s1.state, 2).unwrap();
        assert!(s2.delta.sup_norm() < 1e-14);
        assert!(s2.state.site.sub(&s1.state.site).unwrap().sup_norm() < 1e-14);
        if let RoundMessage::Update { round, client_id, .. } = s2.message() {
            assert_eq!((round, client_id), (2, 0));
        } else {
            panic!("expected an update");
        }
    }

    #[test]
    fn site_telescopes_over_rounds() {
        let cfg = loc_config(LossKind::Beta { beta: 0.5 }, DivergenceSpec::Kl, 0.5);
        let prior = uni(0.0, 1.0);
        let data: Vec<Datum> = [0.5, 1.5, 8.0].iter().map(|&x| Datum::point(x)).collect();
        let mut state = ClientState::new(0, data, cfg, true).unwrap();
        let mut q = prior.clone();
        let mut total = SiteFactor::zero(1, true);
        for r in 1..=4 {
            let step = client_step(&q, &state, r).unwrap();
            total = total.add(&step.delta).unwrap();
            q = prior.multiply(&total.as_factor()).unwrap();
            state = step.state;
        }
        assert!(state.site.sub(&total).unwrap().sup_norm() < 1e-15);
    }

    #[test]
    fn improper_cavity_repair_halves_latest_delta() {
        let cfg = loc_config(LossKind::Nll, DivergenceSpec::Kl, 1.0);
        let mut state = ClientState::new(0, vec![Datum::point(1.0)], cfg.clone(), true).unwrap();
        let mut big = SiteFactor::zero(1, true);
        big.delta_precision = SymMat::diagonal(DVector::from_vec(vec![4.0]));
        state.site = big.clone();
        state.last_delta = Some(big);
        // server posterior precision 3 cannot support a site of precision 4
        let q_s = uni(0.0, 1.0 / 3.0);
        let step = client_step(&q_s, &state, 5).unwrap();
        // server's new site total = old site + emitted delta
        let expect = state.site.add(&step.delta).unwrap();
        assert!(expect.sub(&step.state.site).unwrap().sup_norm() < 1e-14);
        let mut failing = state.clone();
        failing.config.repair = RepairPolicy::Fail;
        assert!(matches!(
            client_step(&q_s, &failing, 5),
            Err(FedGviError::ImproperCavity { client_id: 0 })
        ));
    }
}
