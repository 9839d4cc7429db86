use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::json;

use fedgvi::client::ClientState;
use fedgvi::harness::config::{Experiment, RunConfig};
use fedgvi::harness::experiments::{prior_for, shards_for, telemetry};
use fedgvi::harness::output::OutputDir;
use fedgvi::harness::run_experiment;
use fedgvi::server::ServerState;
use fedgvi::transport::{run_client, serve, TcpEndpoint, TransportKind};
use fedgvi::{FedGviError, Result};

#[derive(Parser)]
#[command(name = "fedgvi", version, about = "Federated generalised variational inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `inproc`, `socket` (free port) or `socket:PORT`.
    #[arg(long)]
    transport: Option<String>,
}

#[derive(Args, Clone)]
struct Remote {
    /// Experiment whose data and method the session uses.
    #[arg(long, default_value = "clutter")]
    experiment: String,
    /// Method name from the configuration.
    #[arg(long)]
    method: Option<String>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

#[derive(Subcommand)]
enum Command {
    /// Location model with clutter outliers.
    Clutter(Common),
    /// Fisher–Rao influence of a single moving outlier.
    Influence(Common),
    /// Planar logistic regression with a mislabelled cluster.
    Logreg(Common),
    /// Oracle checks of the protocol's guarantees.
    Theorems(Common),
    /// Coordinate a socket session for one method.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        remote: Remote,
    },
    /// Join a socket session as one client.
    Client {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        client_id: u32,
    },
}

fn parse_experiment(s: &str) -> Result<Experiment> {
    match s {
        "clutter" => Ok(Experiment::Clutter),
        "influence" => Ok(Experiment::Influence),
        "logreg" => Ok(Experiment::Logreg),
        _ => Err(FedGviError::Config(format!(
            "sessions support clutter, influence or logreg, not {s:?}"
        ))),
    }
}

fn load(experiment: Experiment, common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(experiment, common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(t) = &common.transport {
        cfg.transport = t.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn session_port(cfg: &RunConfig) -> Result<u16> {
    match cfg.transport_kind()? {
        TransportKind::Socket { port } if port != 0 => Ok(port),
        _ => Err(FedGviError::Config(
            "serve and client need --transport socket:PORT with a fixed port".into(),
        )),
    }
}

fn pick_method<'a>(cfg: &'a RunConfig, remote: &Remote) -> Result<&'a fedgvi::harness::config::MethodConfig> {
    match &remote.method {
        Some(name) => cfg.method(name),
        None => cfg
            .methods
            .first()
            .ok_or_else(|| FedGviError::Config("configuration lists no methods".into())),
    }
}

#[derive(Serialize)]
struct SessionRow {
    method: String,
    component: usize,
    posterior_mean: f64,
    posterior_sd: f64,
    rounds: u64,
}

fn run_serve(common: &Common, remote: &Remote) -> Result<bool> {
    let experiment = parse_experiment(&remote.experiment)?;
    let cfg = load(experiment, common)?;
    let port = session_port(&cfg)?;
    let method = pick_method(&cfg, remote)?;
    let listener = TcpListener::bind((remote.host.as_str(), port))?;
    info!("waiting for {} clients on {}", cfg.clients, listener.local_addr()?);
    let server = ServerState::new(prior_for(&cfg, cfg.seed)?, cfg.server.clone())?;
    let fin = serve(&listener, server, cfg.clients, cfg.max_rounds, cfg.timeout())?;
    let m = fin.posterior.to_moment()?;
    let rows: Vec<SessionRow> = (0..m.dim())
        .map(|j| SessionRow {
            method: method.name.clone(),
            component: j,
            posterior_mean: m.mean[j],
            posterior_sd: m.covariance.get(j, j).sqrt(),
            rounds: fin.round,
        })
        .collect();
    let mut out = OutputDir::create(&cfg.out)?;
    out.csv("results.csv", &rows)?;
    out.csv("telemetry.csv", &telemetry(0, &method.name, &fin))?;
    let converged = fin
        .history
        .last()
        .is_some_and(|t| t.max_update_norm < fin.config.tolerance);
    out.manifest(experiment, &cfg, converged, json!({ "method": method.name, "rounds": fin.round }))?;
    Ok(converged)
}

fn run_remote_client(common: &Common, remote: &Remote, client_id: u32) -> Result<bool> {
    let experiment = parse_experiment(&remote.experiment)?;
    let cfg = load(experiment, common)?;
    let port = session_port(&cfg)?;
    let method = pick_method(&cfg, remote)?;
    let shards = shards_for(experiment, &cfg, method, cfg.seed)?;
    let shard = shards
        .get(client_id as usize)
        .ok_or_else(|| FedGviError::Config(format!("client id {client_id} >= {}", cfg.clients)))?;
    let state = ClientState::new(client_id, shard.clone(), cfg.client_config(method)?, cfg.diagonal)?;
    let mut ep = TcpEndpoint::connect((remote.host.as_str(), port))?;
    let fin = run_client(&mut ep, state)?;
    info!("client {client_id} finished after the site was last updated in round {}", fin.site.round_updated);
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Clutter(c) => load(Experiment::Clutter, c).and_then(|cfg| run_experiment(Experiment::Clutter, &cfg)),
        Command::Influence(c) => {
            load(Experiment::Influence, c).and_then(|cfg| run_experiment(Experiment::Influence, &cfg))
        }
        Command::Logreg(c) => load(Experiment::Logreg, c).and_then(|cfg| run_experiment(Experiment::Logreg, &cfg)),
        Command::Theorems(c) => {
            load(Experiment::Theorems, c).and_then(|cfg| run_experiment(Experiment::Theorems, &cfg))
        }
        Command::Serve { common, remote } => run_serve(common, remote),
        Command::Client {
            common,
            remote,
            client_id,
        } => run_remote_client(common, remote, *client_id),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", json!({ "status": "failed", "reason": "one or more assertions did not hold" }));
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{}", json!({ "status": "error", "error": e.to_string(), "kind": format!("{e:?}") }));
            ExitCode::from(2)
        }
    }
}
