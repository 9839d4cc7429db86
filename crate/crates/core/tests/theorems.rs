use fedgvi::harness::config::{Experiment, RunConfig};
use fedgvi::harness::theorems::{self, Check};

fn cfg() -> RunConfig {
    RunConfig::defaults(Experiment::Theorems)
}

fn assert_all(checks: &[Check]) {
    for c in checks {
        println!("{} = {:.3e} (threshold {:.1e}) {}", c.name, c.value, c.threshold, c.detail);
    }
    let bad: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    assert!(bad.is_empty(), "failed checks: {bad:?}");
}

#[test]
fn single_round_recovers_tempered_posterior() {
    for m in [1, 3, 5] {
        assert_all(&theorems::gbi_recovery(&cfg(), m).unwrap());
    }
}

#[test]
fn damped_rounds_contract_geometrically() {
    for m in [2, 5] {
        assert_all(&[theorems::geometric_convergence(&cfg(), m).unwrap()]);
    }
}

#[test]
fn kl_server_is_logarithmic_pool() {
    assert_all(&theorems::opinion_pool(&cfg(), 5, 10).unwrap());
}

#[test]
fn converged_run_is_stationary() {
    assert_all(&theorems::fixed_point_stationarity(&cfg(), 5).unwrap());
}

#[test]
fn score_matching_updates_match_numeric_optimum() {
    assert_all(&theorems::conjugate_certification(7, 50).unwrap());
}

#[test]
fn previous_posterior_as_reference_double_counts() {
    assert_all(&theorems::cavity_necessity(&cfg()).unwrap());
}

#[test]
fn closed_forms_match_quadrature() {
    assert_all(&theorems::closed_form_checks(11, 20).unwrap());
}
