//! Run configuration: per-experiment defaults overlaid by a TOML file and
//! then by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::{ClientConfig, RepairPolicy};
use crate::divergences::DivergenceSpec;
use crate::error::{FedGviError, Result};
use crate::harness::predict::Kappa;
use crate::losses::{LossKind, LossSpec, ModelSpec, MonteCarlo, WeightKernel};
use crate::optim::OptimSettings;
use crate::server::ServerConfig;
use crate::transport::TransportKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Clutter,
    Influence,
    Logreg,
    Theorems,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Clutter => "clutter",
            Experiment::Influence => "influence",
            Experiment::Logreg => "logreg",
            Experiment::Theorems => "theorems",
        }
    }
}

/// Isotropic Gaussian prior. A missing variance is drawn by the Gamma
/// procedure of [`GammaPrior`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub mean: f64,
    pub variance: Option<f64>,
}

/// Prior variance `1/ξ̄` with `ξ̄` the mean of `draws` Gamma(shape, rate) samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
    pub draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Number of inliers (clutter, logreg) or base draws (influence).
    pub n: usize,
    /// Contamination fraction for the clutter source.
    pub epsilon: f64,
    /// Degrees of freedom of the influence source.
    pub df: f64,
    /// Size of the mislabelled cluster for logistic regression.
    pub outliers: usize,
}

/// One federated method: the client loss, divergence and damping, and
/// whether it trains on the uncontaminated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    pub loss: LossKind,
    pub divergence: DivergenceSpec,
    /// Defaults to `1/M`.
    #[serde(default)]
    pub damping: Option<f64>,
    #[serde(default)]
    pub clean: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfluenceConfig {
    /// Outlier positions.
    pub zs: Vec<f64>,
    /// Position whose posterior every other one is compared to.
    pub reference: f64,
    /// Index of the client that receives the outlier.
    pub client: usize,
}

/// Square evaluation grid for predictive comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Independent repetitions with seeds `seed, seed + 1, …`.
    pub replicates: u64,
    pub clients: usize,
    pub max_rounds: u64,
    pub transport: String,
    pub timeout_secs: f64,
    pub out: PathBuf,
    pub model: ModelSpec,
    pub prior: PriorConfig,
    pub gamma_prior: GammaPrior,
    /// Mean-field storage for posteriors and sites.
    pub diagonal: bool,
    pub data: DataConfig,
    pub methods: Vec<MethodConfig>,
    pub server: ServerConfig,
    pub optimiser: OptimSettings,
    pub mc: MonteCarlo,
    pub repair: RepairPolicy,
    pub influence: InfluenceConfig,
    pub eval_grid: EvalGrid,
    pub kappa: Kappa,
}

fn method(name: &str, loss: LossKind, divergence: DivergenceSpec) -> MethodConfig {
    MethodConfig {
        name: name.into(),
        loss,
        divergence,
        damping: None,
        clean: false,
    }
}

impl RunConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let kl = DivergenceSpec::Kl;
        let wkl = DivergenceSpec::WeightedKl { w: 1.0 };
        let mut cfg = RunConfig {
            seed: 0,
            replicates: 1,
            clients: 5,
            max_rounds: 500,
            transport: "inproc".into(),
            timeout_secs: 30.0,
            out: PathBuf::from("out").join(experiment.name()),
            model: ModelSpec::GaussianLocation { sigma: 1.0, dim: 1 },
            prior: PriorConfig {
                mean: 0.0,
                variance: Some(1.0),
            },
            gamma_prior: GammaPrior {
                shape: 1.0,
                rate: 100.0,
                draws: 100,
            },
            diagonal: true,
            data: DataConfig {
                n: 100,
                epsilon: 0.25,
                df: 4.0,
                outliers: 0,
            },
            methods: Vec::new(),
            server: ServerConfig::default(),
            optimiser: OptimSettings::default(),
            mc: MonteCarlo::default(),
            repair: RepairPolicy::default(),
            influence: InfluenceConfig {
                zs: (0..=20).map(f64::from).collect(),
                reference: 0.0,
                client: 0,
            },
            eval_grid: EvalGrid {
                lo: -6.0,
                hi: 6.0,
                points: 25,
            },
            kappa: Kappa::Pi,
        };
        match experiment {
            Experiment::Clutter | Experiment::Theorems => {
                cfg.methods = vec![
                    MethodConfig {
                        clean: true,
                        ..method("pvi_clean", LossKind::Nll, kl)
                    },
                    method("pvi", LossKind::Nll, kl),
                    method("beta_0.5", LossKind::Beta { beta: 0.5 }, kl),
                    method(
                        "sm_constant",
                        LossKind::ScoreMatching {
                            kernel: WeightKernel::Constant { beta_w: 1.0 },
                        },
                        wkl,
                    ),
                    method(
                        "sm_se",
                        LossKind::ScoreMatching {
                            kernel: WeightKernel::SquaredExponential { beta_w: 1.0, c: 1.5 },
                        },
                        wkl,
                    ),
                ];
            }
            Experiment::Influence => {
                cfg.clients = 7;
                cfg.data.n = 99;
                cfg.methods = vec![
                    method("nll", LossKind::Nll, kl),
                    method("beta_0.5", LossKind::Beta { beta: 0.5 }, kl),
                    method("gamma_1.5", LossKind::Gamma { gamma: 1.5 }, kl),
                    method(
                        "sm_se",
                        LossKind::ScoreMatching {
                            kernel: WeightKernel::SquaredExponential { beta_w: 1.0, c: 1.0 },
                        },
                        wkl,
                    ),
                    method(
                        "sm_imq",
                        LossKind::ScoreMatching {
                            kernel: WeightKernel::InverseMultiquadric { beta_w: 1.0, c: 1.0, a: 1.0 },
                        },
                        wkl,
                    ),
                ];
            }
            Experiment::Logreg => {
                cfg.model = ModelSpec::BernoulliLogit { features: 2 };
                cfg.prior.variance = None;
                cfg.data.outliers = 10;
                cfg.max_rounds = 250;
                cfg.server.tolerance = 1e-5;
                cfg.optimiser.tolerance = 1e-6;
                cfg.methods = vec![
                    MethodConfig {
                        clean: true,
                        ..method("pvi_clean", LossKind::Nll, kl)
                    },
                    method("pvi", LossKind::Nll, kl),
                    method(
                        "fedgvi",
                        LossKind::Beta { beta: 0.7 },
                        DivergenceSpec::AlphaRenyi { alpha: 1.5 },
                    ),
                ];
            }
        }
        cfg
    }

    /// Defaults overlaid by the TOML file at `path`, if given. Tables merge
    /// key by key; arrays and scalars replace.
    pub fn load(experiment: Experiment, path: Option<&Path>) -> Result<Self> {
        let base = RunConfig::defaults(experiment);
        let Some(path) = path else {
            return Ok(base);
        };
        let text = std::fs::read_to_string(path)?;
        RunConfig::overlay(base, &text)
    }

    pub fn overlay(base: RunConfig, text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| FedGviError::Config(e.to_string()))?;
        let mut merged =
            toml::Table::try_from(&base).map_err(|e| FedGviError::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| FedGviError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.server.divergence.validate()?;
        self.transport_kind()?;
        if self.clients == 0 && !self.methods.is_empty() {
            return Err(FedGviError::Config("at least one client is required".into()));
        }
        if let Some(v) = self.prior.variance {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FedGviError::Config(format!("prior variance must be positive, got {v}")));
            }
        }
        if !(self.timeout_secs > 0.0) {
            return Err(FedGviError::Config("timeout must be positive".into()));
        }
        if self.influence.client >= self.clients.max(1) {
            return Err(FedGviError::Config("influence client index out of range".into()));
        }
        if self.eval_grid.points < 2 {
            return Err(FedGviError::Config("evaluation grid needs two points".into()));
        }
        for m in &self.methods {
            self.client_config(m)?.validate()?;
        }
        Ok(())
    }

    pub fn transport_kind(&self) -> Result<TransportKind> {
        self.transport.parse()
    }

    pub fn timeout(&self) -> std::time::Duration {
        std::time::Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn client_config(&self, m: &MethodConfig) -> Result<ClientConfig> {
        let damping = m.damping.unwrap_or(1.0 / self.clients.max(1) as f64);
        let mut c = ClientConfig::new(
            LossSpec::new(m.loss, self.model.clone()),
            m.divergence,
            damping,
        );
        c.optimiser = self.optimiser.clone();
        c.mc = self.mc;
        c.repair = self.repair;
        c.validate()?;
        Ok(c)
    }

    pub fn method(&self, name: &str) -> Result<&MethodConfig> {
        self.methods
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| FedGviError::Config(format!("no method named {name:?}")))
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
