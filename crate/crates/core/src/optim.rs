//! Deterministic quasi-Newton minimisation with Armijo backtracking.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{FedGviError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSettings {
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    pub initial_step: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            max_iters: 5000,
            tolerance: 1e-8,
            initial_step: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const MEMORY: usize = 8;
/// Relative change in value treated as rounding noise; sums of many
/// Monte-Carlo terms carry far more than one ulp of error.
const FLAT_TOLERANCE: f64 = 1e-12;

/// L-BFGS direction `−H g` from the stored curvature pairs, or `−step · g`
/// with no history.
fn direction(g: &DVector<f64>, pairs: &VecDeque<(DVector<f64>, DVector<f64>)>, step: f64) -> DVector<f64> {
    let Some((s_last, y_last)) = pairs.back() else {
        return -g * step;
    };
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let a = s.dot(&q) / y.dot(s);
        q -= y * a;
        alphas.push(a);
    }
    q *= s_last.dot(y_last) / y_last.dot(y_last);
    for ((s, y), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = y.dot(&q) / y.dot(s);
        q += s * (a - b);
    }
    -q
}

/// Minimises `f`, which returns the value and gradient at a point, by
/// limited-memory BFGS with Armijo backtracking.
///
/// Trial points where `f` fails or is not finite are treated as `+∞`.
/// Without curvature history the step is the Barzilai-Borwein estimate of the
/// previous iteration along the negative gradient.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, settings: &OptimSettings) -> Result<OptimResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let (mut fx, mut g) = f(&x0)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(FedGviError::InvalidParameter(
            "objective is not finite at the starting point".into(),
        ));
    }
    let mut x = x0;
    let mut step = settings.initial_step;
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::new();
    for it in 0..settings.max_iters {
        let gn = g.norm();
        if gn < settings.tolerance {
            return Ok(OptimResult {
                x,
                value: fx,
                grad_norm: gn,
                iterations: it,
            });
        }
        let mut accepted = None;
        // a failed quasi-Newton search falls back to the gradient direction
        for attempt in 0..2 {
            let mut d = direction(&g, &pairs, step);
            let mut slope = g.dot(&d);
            if slope >= 0.0 || attempt == 1 {
                pairs.clear();
                d = -&g * step;
                slope = g.dot(&d);
            }
            let mut t = 1.0;
            for _ in 0..MAX_BACKTRACKS {
                if t * d.amax() <= f64::EPSILON * x.amax().max(1.0) {
                    break;
                }

                let xn = &x + &d * t;
                if let Ok((fnew, gnew)) = f(&xn) {
                    if fnew.is_finite() && gnew.iter().all(|v| v.is_finite()) {
                        let sufficient = fnew <= fx + ARMIJO_C * t * slope && fnew < fx;
                        // near the optimum the decrease is lost in rounding; accept
                        // if the value is flat to rounding and the gradient shrinks
                        let flat = (fnew - fx).abs() <= FLAT_TOLERANCE * fx.abs().max(1.0)
                            && gnew.norm() < gn;
                        if sufficient || flat {
                            accepted = Some((xn, fnew, gnew, t));
                            break;
                        }
                    }
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((xn, fnew, gnew, t)) = accepted else {
            return Err(FedGviError::NonConvergence {
                iterations: it,
                grad_norm: gn,
            });
        };
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        step = if sy > 0.0 {
            (s.dot(&s) / sy).min(1e6)
        } else {
            (2.0 * t * step).min(1e6)
        };
        if sy > 1e-12 * s.norm() * y.norm() {
            if pairs.len() == MEMORY {
                pairs.pop_front();
            }
            pairs.push_back((s, y));
        }
        x = xn;
        fx = fnew;
        g = gnew;
    }
    let gn = g.norm();
    if gn < settings.tolerance {
        return Ok(OptimResult {
            x,
            value: fx,
            grad_norm: gn,
            iterations: settings.max_iters,
        });
    }
    Err(FedGviError::NonConvergence {
        iterations: settings.max_iters,
        grad_norm: gn,
    })
}
