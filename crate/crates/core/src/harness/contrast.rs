//! Pass/fail rules comparing robust methods with the likelihood baseline.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::harness::config::{MethodConfig, RunConfig};
use crate::harness::experiments::{ClutterRow, InfluenceSummary, LogregRow};
use crate::losses::LossKind;

/// A robust method's error must be below this fraction of the baseline's.
pub const CLUTTER_ERROR_RATIO: f64 = 1.0 / 3.0;
/// A robust method's predictive deviation must be at most this fraction.
pub const LOGREG_DEVIATION_RATIO: f64 = 0.5;
/// Share of replicates on which the ratio bound must hold.
pub const REQUIRED_FRACTION: f64 = 0.9;
/// Likelihood influence must grow at least this much from z = 10 to z = 20.
pub const INFLUENCE_GROWTH: f64 = 1.5;
/// Robust influence may grow at most this relative amount.
pub const INFLUENCE_PLATEAU: f64 = 0.05;

fn is_baseline(m: &MethodConfig) -> bool {
    !m.clean && m.loss == LossKind::Nll
}

fn is_robust(m: &MethodConfig) -> bool {
    !m.clean && m.loss != LossKind::Nll
}

/// Replicates needed out of `n`.
pub fn required(n: usize) -> usize {
    (REQUIRED_FRACTION * n as f64 - 1e-9).ceil() as usize
}

#[derive(Clone, Debug, Serialize)]
pub struct Contrast {
    pub method: String,
    pub baseline: String,
    /// Replicates on which the ratio bound held.
    pub passes: usize,
    pub replicates: usize,
    pub required: usize,
    pub bound: f64,
    pub mean_ratio: f64,
    pub worst_ratio: f64,
    pub passed: bool,
}

/// `ratio(method) < bound` (strict) or `≤ bound` per replicate against the
/// first non-clean likelihood method.
fn contrasts(
    cfg: &RunConfig,
    per_replicate: &BTreeMap<(u64, String), f64>,
    bound: f64,
    strict: bool,
) -> Vec<Contrast> {
    let Some(base) = cfg.methods.iter().find(|m| is_baseline(m)) else {
        return Vec::new();
    };
    cfg.methods
        .iter()
        .filter(|m| is_robust(m))
        .map(|m| {
            let ratios: Vec<f64> = (0..cfg.replicates)
                .filter_map(|r| {
                    let b = per_replicate.get(&(r, base.name.clone()))?;
                    let v = per_replicate.get(&(r, m.name.clone()))?;
                    Some(v / b)
                })
                .collect();
            let passes = ratios
                .iter()
                .filter(|&&q| if strict { q < bound } else { q <= bound })
                .count();
            let n = ratios.len();
            Contrast {
                method: m.name.clone(),
                baseline: base.name.clone(),
                passes,
                replicates: n,
                required: required(n),
                bound,
                mean_ratio: ratios.iter().sum::<f64>() / n.max(1) as f64,
                worst_ratio: ratios.iter().cloned().fold(f64::NAN, f64::max),
                passed: n > 0 && passes >= required(n),
            }
        })
        .collect()
}

/// Absolute location error of each robust method against the likelihood
/// baseline, per replicate.
pub fn clutter_contrasts(cfg: &RunConfig, rows: &[ClutterRow]) -> Vec<Contrast> {
    let table = rows
        .iter()
        .map(|r| ((r.replicate, r.method.clone()), r.abs_error))
        .collect();
    contrasts(cfg, &table, CLUTTER_ERROR_RATIO, true)
}

/// Predictive deviation of each robust method against the likelihood
/// baseline, per replicate.
pub fn logreg_contrasts(cfg: &RunConfig, rows: &[LogregRow]) -> Vec<Contrast> {
    let table = rows
        .iter()
        .map(|r| ((r.replicate, r.method.clone()), r.mean_abs_deviation))
        .collect();
    contrasts(cfg, &table, LOGREG_DEVIATION_RATIO, false)
}

/// Whether a method's influence curve has the expected shape: unbounded
/// growth for the likelihood, a plateau for robust losses.
pub fn influence_shape_holds(method: &MethodConfig, s: &InfluenceSummary) -> bool {
    if method.loss == LossKind::Nll {
        s.growth_ratio.is_some_and(|g| g > INFLUENCE_GROWTH)
    } else {
        s.plateau_increment.is_some_and(|p| p < INFLUENCE_PLATEAU)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Experiment;

    fn row(r: u64, m: &str, e: f64) -> ClutterRow {
        ClutterRow {
            replicate: r,
            seed: r,
            method: m.into(),
            posterior_mean: 0.0,
            posterior_sd: None,
            truth: 0.0,
            abs_error: e,
            rounds: None,
            converged: None,
        }
    }

    #[test]
    fn required_counts() {
        assert_eq!(required(20), 18);
        assert_eq!(required(10), 9);
        assert_eq!(required(1), 1);
    }

    #[test]
    fn clutter_ratio_counts_replicates() {
        let mut cfg = RunConfig::defaults(Experiment::Clutter);
        cfg.replicates = 2;
        let mut rows = Vec::new();
        for r in 0..2 {
            rows.push(row(r, "pvi", 1.0));
            rows.push(row(r, "beta_0.5", 0.1));
            rows.push(row(r, "sm_constant", if r == 0 { 0.2 } else { 0.9 }));
            rows.push(row(r, "sm_se", 1.0 / 3.0));
        }
        let c = clutter_contrasts(&cfg, &rows);
        let get = |n: &str| c.iter().find(|x| x.method == n).unwrap();
        assert!(get("beta_0.5").passed);
        assert_eq!(get("sm_constant").passes, 1);
        assert!(!get("sm_constant").passed);
        // the bound is strict
        assert_eq!(get("sm_se").passes, 0);
        assert!(c.iter().all(|x| x.baseline == "pvi"));
    }
}
