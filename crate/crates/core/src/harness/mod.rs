//! Experiment harness: configuration, synthetic data, drivers and output.

pub mod config;
pub mod contrast;
pub mod data;
pub mod experiments;
pub mod output;
pub mod predict;
pub mod theorems;

use serde_json::json;

use crate::error::Result;
use config::{Experiment, RunConfig};
use experiments::{run_clutter, run_influence, run_logreg};
use output::OutputDir;

/// Runs `experiment` and writes its files under `cfg.out`. Returns whether
/// every assertion the experiment makes held: the robust-versus-likelihood
/// contrasts for clutter and logistic regression, converged runs with the
/// expected curve shapes for influence, and every check for theorems.
pub fn run_experiment(experiment: Experiment, cfg: &RunConfig) -> Result<bool> {
    cfg.validate()?;
    let mut out = OutputDir::create(&cfg.out)?;
    let (passed, summary) = match experiment {
        Experiment::Clutter => {
            let r = run_clutter(cfg)?;
            out.csv("results.csv", &r.rows)?;
            out.csv("telemetry.csv", &r.telemetry)?;
            out.csv("data.csv", &r.data)?;
            let converged = r.rows.iter().all(|row| row.converged != Some(false));
            let contrasts = contrast::clutter_contrasts(cfg, &r.rows);
            let passed = contrasts.iter().all(|c| c.passed);
            (passed, json!({ "all_converged": converged, "contrasts": contrasts }))
        }
        Experiment::Influence => {
            let r = run_influence(cfg)?;
            for (name, rows) in &r.curves {
                out.csv(&format!("influence_{name}.csv"), rows)?;
            }
            out.csv("results.csv", &r.summary)?;
            let converged = r.summary.iter().all(|s| s.all_converged);
            let shapes: Vec<_> = cfg
                .methods
                .iter()
                .zip(&r.summary)
                .map(|(m, s)| (m.name.clone(), contrast::influence_shape_holds(m, s)))
                .collect();
            let passed = converged && shapes.iter().all(|(_, ok)| *ok);
            (passed, json!({ "all_converged": converged, "curve_shape_holds": shapes }))
        }
        Experiment::Logreg => {
            let r = run_logreg(cfg)?;
            out.csv("results.csv", &r.rows)?;
            out.csv("posteriors.csv", &r.posteriors)?;
            out.csv("telemetry.csv", &r.telemetry)?;
            let mut header = vec!["x1".to_string(), "x2".to_string()];
            header.extend(cfg.methods.iter().map(|m| format!("p_{}", m.name)));
            let rows: Vec<Vec<String>> = r
                .predictive
                .iter()
                .map(|(a, b, ps)| {
                    let mut row = vec![a.to_string(), b.to_string()];
                    row.extend(ps.iter().map(f64::to_string));
                    row
                })
                .collect();
            out.table("predictive.csv", &header, &rows)?;
            let data: Vec<Vec<String>> = r
                .data
                .iter()
                .map(|d| vec![d.x[0].to_string(), d.x[1].to_string(), d.y.to_string()])
                .collect();
            out.table("data.csv", &["x1".into(), "x2".into(), "y".into()], &data)?;
            let converged = r.rows.iter().all(|row| row.converged);
            let contrasts = contrast::logreg_contrasts(cfg, &r.rows);
            let passed = contrasts.iter().all(|c| c.passed);
            (passed, json!({ "all_converged": converged, "contrasts": contrasts }))
        }
        Experiment::Theorems => {
            let checks = theorems::run_all(cfg)?;
            out.csv("results.csv", &checks)?;
            let passed = checks.iter().all(|c| c.passed);
            let failed: Vec<&str> = checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.name.as_str())
                .collect();
            (passed, json!({ "checks": checks.len(), "failed": failed }))
        }
    };
    out.manifest(experiment, cfg, passed, summary)?;
    Ok(passed)
}
