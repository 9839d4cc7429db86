//! Experiment drivers.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::client::ClientState;
use crate::error::{FedGviError, Result};
use crate::exp_family::NatGaussian;
use crate::harness::config::{Experiment, MethodConfig, RunConfig};
use crate::harness::data::{
    gamma_prior_variance, gen_clutter, gen_logreg_2d, gen_student_t, partition_homogeneous,
};
use crate::harness::predict::predict_logit;
use crate::linalg::SymMat;
use crate::losses::Datum;
use crate::oracles::pif_curve;
use crate::server::ServerState;
use crate::transport::{run_federation, TransportKind};

/// Isotropic prior of the model's parameter dimension.
pub fn prior_for(cfg: &RunConfig, seed: u64) -> Result<NatGaussian> {
    let d = cfg.model.param_dim();
    let var = match cfg.prior.variance {
        Some(v) => v,
        None => gamma_prior_variance(
            cfg.gamma_prior.shape,
            cfg.gamma_prior.rate,
            cfg.gamma_prior.draws,
            seed,
        )?,
    };
    let precision = DVector::from_element(d, 1.0 / var);
    let shift = DVector::from_element(d, cfg.prior.mean / var);
    if cfg.diagonal {
        NatGaussian::diagonal(precision, shift)
    } else {
        NatGaussian::new(SymMat::dense(nalgebra::DMatrix::from_diagonal(&precision))?, shift)
    }
}

/// Final states of one federated run.
pub struct MethodRun {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl MethodRun {
    pub fn rounds(&self) -> u64 {
        self.server.round
    }

    pub fn converged(&self) -> bool {
        self.server
            .history
            .last()
            .is_some_and(|t| t.max_update_norm < self.server.config.tolerance)
    }

    pub fn mean_sd(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = self.server.posterior.to_moment()?;
        Ok((m.mean.iter().copied().collect(), m.std_devs().iter().copied().collect()))
    }
}

/// Builds the clients for `method` over `shards` and runs the federation.
pub fn federate(
    cfg: &RunConfig,
    kind: &TransportKind,
    prior: &NatGaussian,
    shards: &[Vec<Datum>],
    method: &MethodConfig,
) -> Result<MethodRun> {
    let cc = cfg.client_config(method)?;
    let clients = shards
        .iter()
        .enumerate()
        .map(|(i, s)| ClientState::new(i as u32, s.clone(), cc.clone(), cfg.diagonal))
        .collect::<Result<Vec<_>>>()?;
    let server = ServerState::new(prior.clone(), cfg.server.clone())?;
    let run = run_federation(kind, server, clients, cfg.max_rounds, cfg.timeout())?;
    Ok(MethodRun {
        server: run.server,
        clients: run.clients,
    })
}

/// Several runs may share a process only if they do not fight over a port.
fn parallel_ok(kind: &TransportKind) -> bool {
    !matches!(kind, TransportKind::Socket { port } if *port != 0)
}

/// Client data for one replicate of an experiment. The influence shards do
/// not carry the outlier.
pub fn shards_for(
    experiment: Experiment,
    cfg: &RunConfig,
    method: &MethodConfig,
    seed: u64,
) -> Result<Vec<Vec<Datum>>> {
    let data = match experiment {
        Experiment::Clutter | Experiment::Theorems => {
            let d = gen_clutter(cfg.data.n, cfg.data.epsilon, seed)?;
            if method.clean {
                d.clean
            } else {
                d.data
            }
        }
        Experiment::Influence => gen_student_t(cfg.data.n, cfg.data.df, 0.0, 1.0, seed)?,
        Experiment::Logreg => {
            let d = gen_logreg_2d(cfg.data.n, cfg.data.outliers, seed);
            if method.clean {
                d.inliers
            } else {
                d.all()
            }
        }
    };
    Ok(partition_homogeneous(&data, cfg.clients, seed))
}

#[derive(Clone, Debug, Serialize)]
pub struct TelemetryRow {
    pub replicate: u64,
    pub method: String,
    pub round: u64,
    pub clients: usize,
    pub max_update_norm: f64,
    pub component: usize,
    pub posterior_mean: f64,
    pub posterior_sd: f64,
}

/// Per-round server history flattened to one row per component.
pub fn telemetry(replicate: u64, method: &str, server: &ServerState) -> Vec<TelemetryRow> {
    server
        .history
        .iter()
        .flat_map(|t| {
            (0..t.posterior_mean.len()).map(move |j| TelemetryRow {
                replicate,
                method: method.to_string(),
                round: t.round,
                clients: t.clients,
                max_update_norm: t.max_update_norm,
                component: j,
                posterior_mean: t.posterior_mean[j],
                posterior_sd: t.posterior_sd[j],
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct PosteriorRow {
    pub replicate: u64,
    pub method: String,
    pub component: usize,
    pub posterior_mean: f64,
    pub posterior_sd: f64,
}

fn posterior_rows(replicate: u64, method: &str, run: &MethodRun) -> Result<Vec<PosteriorRow>> {
    let (m, s) = run.mean_sd()?;
    Ok((0..m.len())
        .map(|j| PosteriorRow {
            replicate,
            method: method.to_string(),
            component: j,
            posterior_mean: m[j],
            posterior_sd: s[j],
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct ClutterRow {
    pub replicate: u64,
    pub seed: u64,
    pub method: String,
    pub posterior_mean: f64,
    pub posterior_sd: Option<f64>,
    pub truth: f64,
    pub abs_error: f64,
    pub rounds: Option<u64>,
    pub converged: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DataRow {
    pub replicate: u64,
    pub x: f64,
    pub outlier: bool,
}

pub struct ClutterReport {
    pub rows: Vec<ClutterRow>,
    pub telemetry: Vec<TelemetryRow>,
    pub data: Vec<DataRow>,
}

fn sample_mean(data: &[Datum]) -> f64 {
    data.iter().map(|d| d.x[0]).sum::<f64>() / data.len() as f64
}

/// Location posteriors under every configured method, per replicate, next
/// to the sample means of the contaminated and clean data.
pub fn run_clutter(cfg: &RunConfig) -> Result<ClutterReport> {
    let kind = cfg.transport_kind()?;
    let jobs: Vec<(u64, usize)> = (0..cfg.replicates)
        .flat_map(|r| (0..cfg.methods.len()).map(move |k| (r, k)))
        .collect();
    let run_one = |&(r, k): &(u64, usize)| -> Result<(u64, usize, MethodRun)> {
        let seed = cfg.seed + r;
        let method = &cfg.methods[k];
        let shards = shards_for(Experiment::Clutter, cfg, method, seed)?;
        let prior = prior_for(cfg, seed)?;
        Ok((r, k, federate(cfg, &kind, &prior, &shards, method)?))
    };
    let runs: Vec<(u64, usize, MethodRun)> = if parallel_ok(&kind) {
        jobs.par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run_one).collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    let mut tele = Vec::new();
    let mut data_rows = Vec::new();
    for r in 0..cfg.replicates {
        let seed = cfg.seed + r;
        let d = gen_clutter(cfg.data.n, cfg.data.epsilon, seed)?;
        let truth = d.inlier_location();
        for (name, xs) in [("mle", &d.data), ("mle_clean", &d.clean)] {
            let m = sample_mean(xs);
            rows.push(ClutterRow {
                replicate: r,
                seed,
                method: name.into(),
                posterior_mean: m,
                posterior_sd: None,
                truth,
                abs_error: (m - truth).abs(),
                rounds: None,
                converged: None,
            });
        }
        for (_, k, run) in runs.iter().filter(|(rr, _, _)| *rr == r) {
            let name = &cfg.methods[*k].name;
            let (m, s) = run.mean_sd()?;
            rows.push(ClutterRow {
                replicate: r,
                seed,
                method: name.clone(),
                posterior_mean: m[0],
                posterior_sd: Some(s[0]),
                truth,
                abs_error: (m[0] - truth).abs(),
                rounds: Some(run.rounds()),
                converged: Some(run.converged()),
            });
            tele.extend(telemetry(r, name, &run.server));
        }
        data_rows.extend(d.data.iter().zip(&d.outlier).map(|(x, o)| DataRow {
            replicate: r,
            x: x.x[0],
            outlier: *o,
        }));
    }
    Ok(ClutterReport {
        rows,
        telemetry: tele,
        data: data_rows,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct InfluenceRow {
    pub method: String,
    pub z: f64,
    pub fisher_rao: f64,
    pub posterior_mean: f64,
    pub posterior_sd: f64,
    pub rounds: u64,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct InfluenceSummary {
    pub method: String,
    pub fr_at_10: Option<f64>,
    pub fr_at_20: Option<f64>,
    /// `FR(20) / FR(10)`.
    pub growth_ratio: Option<f64>,
    /// `(FR(20) − FR(10)) / FR(10)`.
    pub plateau_increment: Option<f64>,
    pub all_converged: bool,
}

pub struct InfluenceReport {
    pub curves: BTreeMap<String, Vec<InfluenceRow>>,
    pub summary: Vec<InfluenceSummary>,
}

/// Server posterior with one extra datum at `z` on the designated client.
pub fn influence_run(
    cfg: &RunConfig,
    kind: &TransportKind,
    method: &MethodConfig,
    z: f64,
) -> Result<MethodRun> {
    let mut shards = shards_for(Experiment::Influence, cfg, method, cfg.seed)?;
    shards[cfg.influence.client].push(Datum::point(z));
    let prior = prior_for(cfg, cfg.seed)?;
    federate(cfg, kind, &prior, &shards, method)
}

/// Fisher–Rao distance from the reference posterior as the outlier moves.
pub fn run_influence(cfg: &RunConfig) -> Result<InfluenceReport> {
    let kind = cfg.transport_kind()?;
    let mut positions = cfg.influence.zs.clone();
    positions.push(cfg.influence.reference);
    let jobs: Vec<(usize, f64)> = (0..cfg.methods.len())
        .flat_map(|k| positions.iter().map(move |&z| (k, z)))
        .collect();
    let run_one = |&(k, z): &(usize, f64)| -> Result<((usize, u64), MethodRun)> {
        Ok(((k, z.to_bits()), influence_run(cfg, &kind, &cfg.methods[k], z)?))
    };
    let runs: BTreeMap<(usize, u64), MethodRun> = if parallel_ok(&kind) {
        jobs.par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run_one).collect::<Result<_>>()?
    };
    let mut curves = BTreeMap::new();
    let mut summary = Vec::new();
    for (k, method) in cfg.methods.iter().enumerate() {
        let lookup = |z: f64| -> Result<NatGaussian> {
            runs.get(&(k, z.to_bits()))
                .map(|r| r.server.posterior.clone())
                .ok_or_else(|| FedGviError::Config(format!("no run at z = {z}")))
        };
        let curve = pif_curve(cfg.influence.reference, &cfg.influence.zs, lookup)?;
        let mut rows = Vec::with_capacity(curve.len());
        for (z, fr) in curve {
            let run = &runs[&(k, z.to_bits())];
            let (m, s) = run.mean_sd()?;
            rows.push(InfluenceRow {
                method: method.name.clone(),
                z,
                fisher_rao: fr,
                posterior_mean: m[0],
                posterior_sd: s[0],
                rounds: run.rounds(),
                converged: run.converged(),
            });
        }
        let at = |z: f64| rows.iter().find(|r| r.z == z).map(|r| r.fisher_rao);
        let (f10, f20) = (at(10.0), at(20.0));
        summary.push(InfluenceSummary {
            method: method.name.clone(),
            fr_at_10: f10,
            fr_at_20: f20,
            growth_ratio: f10.zip(f20).map(|(a, b)| b / a),
            plateau_increment: f10.zip(f20).map(|(a, b)| (b - a) / a),
            all_converged: rows.iter().all(|r| r.converged)
                && runs[&(k, cfg.influence.reference.to_bits())].converged(),
        });
        curves.insert(method.name.clone(), rows);
    }
    Ok(InfluenceReport { curves, summary })
}

#[derive(Clone, Debug, Serialize)]
pub struct LogregRow {
    pub replicate: u64,
    pub seed: u64,
    pub method: String,
    /// Mean absolute predictive difference from the clean-data target over
    /// the evaluation grid.
    pub mean_abs_deviation: f64,
    pub rounds: u64,
    pub converged: bool,
}

pub struct LogregReport {
    pub rows: Vec<LogregRow>,
    pub posteriors: Vec<PosteriorRow>,
    pub telemetry: Vec<TelemetryRow>,
    /// Evaluation grid of replicate 0: `(x₁, x₂)` then one probability per method.
    pub predictive: Vec<(f64, f64, Vec<f64>)>,
    pub data: Vec<Datum>,
}

pub fn eval_points(cfg: &RunConfig) -> Vec<(f64, f64)> {
    let g = &cfg.eval_grid;
    let axis = crate::oracles::linspace(g.lo, g.hi, g.points);
    axis.iter()
        .flat_map(|&a| axis.iter().map(move |&b| (a, b)))
        .collect()
}

/// Predictive deviation of each method from the first clean-data method.
pub fn run_logreg(cfg: &RunConfig) -> Result<LogregReport> {
    let kind = cfg.transport_kind()?;
    let target = cfg
        .methods
        .iter()
        .position(|m| m.clean)
        .ok_or_else(|| FedGviError::Config("logreg needs a method with clean = true".into()))?;
    let jobs: Vec<(u64, usize)> = (0..cfg.replicates)
        .flat_map(|r| (0..cfg.methods.len()).map(move |k| (r, k)))
        .collect();
    let run_one = |&(r, k): &(u64, usize)| -> Result<((u64, usize), MethodRun)> {
        let seed = cfg.seed + r;
        let method = &cfg.methods[k];
        let shards = shards_for(Experiment::Logreg, cfg, method, seed)?;
        let prior = prior_for(cfg, seed)?;
        Ok(((r, k), federate(cfg, &kind, &prior, &shards, method)?))
    };
    let runs: BTreeMap<(u64, usize), MethodRun> = if parallel_ok(&kind) {
        jobs.par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run_one).collect::<Result<_>>()?
    };
    let points = eval_points(cfg);
    let mut report = LogregReport {
        rows: Vec::new(),
        posteriors: Vec::new(),
        telemetry: Vec::new(),
        predictive: Vec::new(),
        data: gen_logreg_2d(cfg.data.n, cfg.data.outliers, cfg.seed).all(),
    };
    for r in 0..cfg.replicates {
        let preds: Vec<Vec<f64>> = (0..cfg.methods.len())
            .map(|k| {
                let q = runs[&(r, k)].server.posterior.to_moment()?;
                Ok(points
                    .iter()
                    .map(|&(a, b)| predict_logit(&q, &[a, b], cfg.kappa))
                    .collect())
            })
            .collect::<Result<_>>()?;
        for (k, method) in cfg.methods.iter().enumerate() {
            let run = &runs[&(r, k)];
            let dev = preds[k]
                .iter()
                .zip(&preds[target])
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>()
                / points.len() as f64;
            report.rows.push(LogregRow {
                replicate: r,
                seed: cfg.seed + r,
                method: method.name.clone(),
                mean_abs_deviation: dev,
                rounds: run.rounds(),
                converged: run.converged(),
            });
            report.posteriors.extend(posterior_rows(r, &method.name, run)?);
            report.telemetry.extend(telemetry(r, &method.name, &run.server));
        }
        if r == 0 {
            report.predictive = points
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| (a, b, preds.iter().map(|p| p[i]).collect()))
                .collect();
        }
    }
    Ok(report)
}
