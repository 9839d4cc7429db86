//! Synthetic data sources and partitioning.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StudentT};

use crate::error::{FedGviError, Result};
use crate::losses::Datum;

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite positive sd")
}

/// Contaminated location data together with its uncontaminated twin.
#[derive(Clone, Debug)]
pub struct ClutterData {
    /// Latent draw; inliers are centred at `theta - 2`.
    pub theta: f64,
    pub data: Vec<Datum>,
    pub outlier: Vec<bool>,
    /// The same inlier draws with no replacement by outliers.
    pub clean: Vec<Datum>,
}

impl ClutterData {
    pub fn inlier_location(&self) -> f64 {
        self.theta - 2.0
    }
}

/// `θ ~ N(0, 0.5²)`, `x | θ ~ (1−ε) N(θ−2, 1) + ε N(θ+3, 0.5²)`.
///
/// Every point consumes the same random draws whatever `ε` is, so runs with
/// different `ε` and a shared seed share their inliers.
pub fn gen_clutter(n: usize, epsilon: f64, seed: u64) -> Result<ClutterData> {
    if !(0.0..0.5).contains(&epsilon) {
        return Err(FedGviError::InvalidParameter(format!(
            "contamination fraction must lie in [0, 0.5), got {epsilon}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = normal(0.0, 0.5).sample(&mut rng);
    let inlier = normal(theta - 2.0, 1.0);
    let outlier = normal(theta + 3.0, 0.5);
    let mut out = ClutterData {
        theta,
        data: Vec::with_capacity(n),
        outlier: Vec::with_capacity(n),
        clean: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let u: f64 = rng.random();
        let a = inlier.sample(&mut rng);
        let b = outlier.sample(&mut rng);
        let is_out = u < epsilon;
        out.data.push(Datum::point(if is_out { b } else { a }));
        out.outlier.push(is_out);
        out.clean.push(Datum::point(a));
    }
    Ok(out)
}

/// Draws `n` points from `(1−ε) base + ε contaminant`; the flags mark
/// contaminant draws.
pub fn gen_huber(
    n: usize,
    epsilon: f64,
    seed: u64,
    mut base: impl FnMut(&mut ChaCha8Rng) -> f64,
    mut contaminant: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(FedGviError::InvalidParameter(format!(
            "contamination fraction must lie in (0, 0.5), got {epsilon}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for _ in 0..n {
        let is_out = rng.random::<f64>() < epsilon;
        xs.push(if is_out {
            contaminant(&mut rng)
        } else {
            base(&mut rng)
        });
        flags.push(is_out);
    }
    Ok((xs, flags))
}

/// `n` draws of `loc + scale · T(df)`.
pub fn gen_student_t(n: usize, df: f64, loc: f64, scale: f64, seed: u64) -> Result<Vec<Datum>> {
    let t = StudentT::new(df)
        .map_err(|e| FedGviError::InvalidParameter(format!("student-t: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| Datum::point(loc + scale * t.sample(&mut rng)))
        .collect())
}

/// Two-class planar data with an optional mislabelled cluster.
#[derive(Clone, Debug)]
pub struct LogregData {
    pub inliers: Vec<Datum>,
    pub outliers: Vec<Datum>,
}

impl LogregData {
    pub fn all(&self) -> Vec<Datum> {
        self.inliers.iter().chain(&self.outliers).cloned().collect()
    }
}

pub const LOGREG_CLASS_CENTRES: [[f64; 2]; 2] = [[-2.0, -1.0], [2.0, 1.0]];
pub const LOGREG_CLASS_SD: f64 = 1.0;
pub const LOGREG_OUTLIER_CENTRE: [f64; 2] = [-4.0, -2.0];
pub const LOGREG_OUTLIER_SD: f64 = 0.5;
/// Inlier draws are kept only if their signed distance to the line
/// `x₁ + 0.5 x₂ = 0` has the class sign and exceeds this margin.
pub const LOGREG_MARGIN: f64 = 0.25;

/// `n` inliers split evenly between two Gaussian blobs (classes 0 and 1,
/// truncated to be separable with a margin), plus `outliers` points from a
/// third Gaussian labelled class 1.
pub fn gen_logreg_2d(n: usize, outliers: usize, seed: u64) -> LogregData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = normal(0.0, 1.0);
    let norm = (1.0f64 + 0.25).sqrt();
    let mut inliers = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let c = LOGREG_CLASS_CENTRES[class];
        let sign = if class == 1 { 1.0 } else { -1.0 };
        loop {
            let x = [
                c[0] + LOGREG_CLASS_SD * sd.sample(&mut rng),
                c[1] + LOGREG_CLASS_SD * sd.sample(&mut rng),
            ];
            if sign * (x[0] + 0.5 * x[1]) / norm > LOGREG_MARGIN {
                inliers.push(Datum::labelled(x.to_vec(), class as f64));
                break;
            }
        }
    }
    let outliers = (0..outliers)
        .map(|_| {
            let x = vec![
                LOGREG_OUTLIER_CENTRE[0] + LOGREG_OUTLIER_SD * sd.sample(&mut rng),
                LOGREG_OUTLIER_CENTRE[1] + LOGREG_OUTLIER_SD * sd.sample(&mut rng),
            ];
            Datum::labelled(x, 1.0)
        })
        .collect();
    LogregData { inliers, outliers }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull by the monotone chain, counter-clockwise without repeats.
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Whether two labelled planar point sets can be split strictly by a line.
///
/// Two convex polygons are disjoint iff the projections onto the normal of
/// one of their edges are disjoint; degenerate hulls add their own direction
/// and its normal as candidates.
pub fn linearly_separable(data: &[Datum]) -> bool {
    let class = |c: f64| -> Vec<[f64; 2]> {
        data.iter()
            .filter(|d| d.y == c)
            .map(|d| [d.x[0], d.x[1]])
            .collect()
    };
    let (a, b) = (convex_hull(class(0.0)), convex_hull(class(1.0)));
    if a.is_empty() || b.is_empty() {
        return true;
    }
    let mut axes = Vec::new();
    for hull in [&a, &b] {
        for i in 0..hull.len() {
            let p = hull[i];
            let q = hull[(i + 1) % hull.len()];
            let e = [q[0] - p[0], q[1] - p[1]];
            axes.push([-e[1], e[0]]);
            if hull.len() < 3 {
                axes.push(e);
            }
        }
    }
    // single points on both sides: the joining direction separates them
    axes.push([b[0][0] - a[0][0], b[0][1] - a[0][1]]);
    axes.iter().filter(|n| n[0] != 0.0 || n[1] != 0.0).any(|n| {
        let proj = |h: &[[f64; 2]]| {
            h.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let v = n[0] * p[0] + n[1] * p[1];
                (lo.min(v), hi.max(v))
            })
        };
        let (alo, ahi) = proj(&a);
        let (blo, bhi) = proj(&b);
        ahi < blo || bhi < alo
    })
}

/// Isotropic prior variance `1/ξ̄` where `ξ̄` is the mean of `draws`
/// samples from a Gamma with shape `shape` and rate `rate`.
pub fn gamma_prior_variance(shape: f64, rate: f64, draws: usize, seed: u64) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| FedGviError::InvalidParameter(format!("gamma prior: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = (0..draws).map(|_| g.sample(&mut rng)).sum::<f64>() / draws as f64;
    Ok(1.0 / mean)
}

/// Shuffles with `seed` and deals the data round-robin into `m` shards, so
/// shard sizes differ by at most one.
pub fn partition_homogeneous(data: &[Datum], m: usize, seed: u64) -> Vec<Vec<Datum>> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed));
    let mut shards = vec![Vec::new(); m];
    for (k, i) in idx.into_iter().enumerate() {
        shards[k % m].push(data[i].clone());
    }
    shards
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clutter_basics() {
        let d = gen_clutter(200, 0.0, 3).unwrap();
        assert!(d.outlier.iter().all(|o| !o));
        assert_eq!(d.data, d.clean);
        let c = gen_clutter(100, 0.25, 3).unwrap();
        assert_eq!(c.data.len(), 100);
        assert_eq!(c.theta, d.theta);
        for i in 0..100 {
            if !c.outlier[i] {
                assert_eq!(c.data[i], d.data[i]);
            }
        }
        assert!(gen_clutter(10, 0.5, 0).is_err());
        assert!(gen_clutter(10, -0.1, 0).is_err());
    }

    #[test]
    fn clutter_outlier_fraction_within_binomial_band() {
        let (n, eps) = (20_000, 0.25);
        let d = gen_clutter(n, eps, 11).unwrap();
        let k = d.outlier.iter().filter(|&&o| o).count() as f64;
        let sd = (n as f64 * eps * (1.0 - eps)).sqrt();
        assert!((k - n as f64 * eps).abs() < 3.0 * sd);
    }

    #[test]
    fn huber_mixture_cdf_inside_dkw_band() {
        let n = 20_000;
        let eps = 0.2;
        let (xs, _) = gen_huber(
            n,
            eps,
            5,
            |r| normal(0.0, 1.0).sample(r),
            |r| normal(6.0, 1.0).sample(r),
        )
        .unwrap();
        let phi = |z: f64| 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
        let mut s = xs.clone();
        s.sort_by(f64::total_cmp);
        let mut sup: f64 = 0.0;
        for (i, x) in s.iter().enumerate() {
            let f = (1.0 - eps) * phi(*x) + eps * phi(x - 6.0);
            sup = sup
                .max(((i + 1) as f64 / n as f64 - f).abs())
                .max((i as f64 / n as f64 - f).abs());
        }
        // DKW at level 1e-3
        let band = ((2.0f64 / 1e-3).ln() / (2.0 * n as f64)).sqrt();
        assert!(sup < band, "{sup} >= {band}");
        let again = gen_huber(n, eps, 5, |r| normal(0.0, 1.0).sample(r), |r| normal(6.0, 1.0).sample(r))
            .unwrap()
            .0;
        assert_eq!(xs, again);
        assert!(gen_huber(10, 0.0, 0, |_| 0.0, |_| 1.0).is_err());
    }

    fn erf(x: f64) -> f64 {
        let n = 4000;
        let h = x / n as f64;
        let f = |t: f64| (-t * t).exp();
        let mut s = f(0.0) + f(x);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn small_contamination_degenerates_to_base() {
        let (xs, flags) = gen_huber(1000, 1e-12, 1, |_| 1.0, |_| 99.0).unwrap();
        assert!(flags.iter().all(|f| !f));
        assert!(xs.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn logreg_separability() {
        for seed in 0..10 {
            let d = gen_logreg_2d(100, 0, seed);
            assert_eq!(d.inliers.iter().filter(|p| p.y == 1.0).count(), 50);
            assert!(linearly_separable(&d.inliers), "seed {seed}");
            let c = gen_logreg_2d(100, 10, seed);
            assert_eq!(c.outliers.len(), 10);
            assert!(!linearly_separable(&c.all()), "seed {seed}");
        }
    }

    #[test]
    fn separability_edge_cases() {
        let p = |x: f64, y: f64, c: f64| Datum::labelled(vec![x, y], c);
        assert!(linearly_separable(&[p(0.0, 0.0, 0.0), p(1.0, 1.0, 1.0)]));
        assert!(!linearly_separable(&[p(0.0, 0.0, 0.0), p(0.0, 0.0, 1.0)]));
        // collinear, interleaved
        assert!(!linearly_separable(&[
            p(0.0, 0.0, 0.0),
            p(2.0, 0.0, 0.0),
            p(1.0, 0.0, 1.0)
        ]));
        // XOR
        assert!(!linearly_separable(&[
            p(0.0, 0.0, 0.0),
            p(1.0, 1.0, 0.0),
            p(1.0, 0.0, 1.0),
            p(0.0, 1.0, 1.0)
        ]));
        assert!(linearly_separable(&[
            p(0.0, 0.0, 0.0),
            p(0.0, 1.0, 0.0),
            p(2.0, 0.0, 1.0),
            p(2.0, 1.0, 1.0)
        ]));
    }

    #[test]
    fn partition_is_a_balanced_permutation() {
        let data: Vec<Datum> = (0..23).map(|i| Datum::point(i as f64)).collect();
        let shards = partition_homogeneous(&data, 5, 9);
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<f64> = shards.concat().iter().map(|d| d.x[0]).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..23).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(shards, partition_homogeneous(&data, 5, 9));
    }

    #[test]
    fn student_t_reproducible() {
        let a = gen_student_t(99, 4.0, 0.0, 1.0, 2).unwrap();
        assert_eq!(a, gen_student_t(99, 4.0, 0.0, 1.0, 2).unwrap());
        assert!(gen_student_t(3, -1.0, 0.0, 1.0, 2).is_err());
    }

    #[test]
    fn gamma_prior_variance_near_reciprocal_mean() {
        let v = gamma_prior_variance(1.0, 100.0, 100_000, 4).unwrap();
        assert!((v - 100.0).abs() < 1.0);
    }
}
