//! Gaussian factors in natural parameters.
//!
//! A [`NatGaussian`] represents the (possibly unnormalised, possibly improper)
//! factor `exp{-½ θᵀΛθ + ηᵀθ + c}`. Posteriors, priors, cavities and sites all
//! share this representation, so products and quotients are additions and
//! subtractions of `(Λ, η)`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FedGviError, Result};
use crate::linalg::SymMat;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct NatGaussian {
    precision: SymMat,
    shift: DVector<f64>,
    log_offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentGaussian {
    pub mean: DVector<f64>,
    pub covariance: SymMat,
}

impl MomentGaussian {
    pub fn new(mean: DVector<f64>, covariance: SymMat) -> Result<Self> {
        if mean.len() != covariance.dim() {
            return Err(FedGviError::DimensionMismatch {
                expected: mean.len(),
                found: covariance.dim(),
            });
        }
        if !covariance.is_positive_definite() {
            return Err(FedGviError::NotPositiveDefinite);
        }
        Ok(MomentGaussian { mean, covariance })
    }

    pub fn univariate(mean: f64, variance: f64) -> Result<Self> {
        MomentGaussian::new(
            DVector::from_element(1, mean),
            SymMat::diagonal(DVector::from_element(1, variance)),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal standard deviations.
    pub fn std_devs(&self) -> DVector<f64> {
        self.covariance.diag().map(f64::sqrt)
    }
}

impl NatGaussian {
    pub fn new(precision: SymMat, shift: DVector<f64>) -> Result<Self> {
        if precision.dim() != shift.len() {
            return Err(FedGviError::DimensionMismatch {
                expected: precision.dim(),
                found: shift.len(),
            });
        }
        // SymMat::Dense is symmetrised on construction; re-symmetrise in case
        // the caller built the enum variant directly.
        let precision = match precision {
            SymMat::Dense(m) => SymMat::dense(m)?,
            d => d,
        };
        Ok(NatGaussian {
            precision,
            shift,
            log_offset: 0.0,
        })
    }

    pub fn from_dense(precision: DMatrix<f64>, shift: DVector<f64>) -> Result<Self> {
        NatGaussian::new(SymMat::dense(precision)?, shift)
    }

    pub fn diagonal(precision: DVector<f64>, shift: DVector<f64>) -> Result<Self> {
        NatGaussian::new(SymMat::diagonal(precision), shift)
    }

    /// The factor `exp{0}`: identity for [`NatGaussian::multiply`].
    pub fn unit(dim: usize, diagonal: bool) -> Self {
        NatGaussian {
            precision: SymMat::zeros(dim, diagonal),
            shift: DVector::zeros(dim),
            log_offset: 0.0,
        }
    }

    pub fn standard(dim: usize) -> Self {
        NatGaussian {
            precision: SymMat::identity(dim),
            shift: DVector::zeros(dim),
            log_offset: 0.0,
        }
    }

    /// `N(mean, variance)` in one dimension.
    pub fn univariate(mean: f64, variance: f64) -> Result<Self> {
        NatGaussian::from_moment(&MomentGaussian::univariate(mean, variance)?)
    }

    pub fn with_log_offset(mut self, c: f64) -> Self {
        self.log_offset = c;
        self
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn precision(&self) -> &SymMat {
        &self.precision
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    pub fn log_offset(&self) -> f64 {
        self.log_offset
    }

    pub fn is_diagonal(&self) -> bool {
        self.precision.is_diagonal()
    }

    pub fn is_proper(&self) -> bool {
        self.precision.is_positive_definite()
    }

    fn check_dim(&self, other: &NatGaussian) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(FedGviError::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }

    fn require_proper(&self) -> Result<()> {
        if self.is_proper() {
            Ok(())
        } else {
            Err(FedGviError::NotPositiveDefinite)
        }
    }

    pub fn multiply(&self, other: &NatGaussian) -> Result<NatGaussian> {
        self.check_dim(other)?;
        Ok(NatGaussian {
            precision: self.precision.add(&other.precision)?,
            shift: &self.shift + &other.shift,
            log_offset: self.log_offset + other.log_offset,
        })
    }

    pub fn divide(&self, other: &NatGaussian) -> Result<NatGaussian> {
        self.check_dim(other)?;
        Ok(NatGaussian {
            precision: self.precision.sub(&other.precision)?,
            shift: &self.shift - &other.shift,
            log_offset: self.log_offset - other.log_offset,
        })
    }

    /// The factor raised to the power `t`.
    pub fn power(&self, t: f64) -> NatGaussian {
        NatGaussian {
            precision: self.precision.scale(t),
            shift: &self.shift * t,
            log_offset: self.log_offset * t,
        }
    }

    /// `log ∫ exp{-½θᵀΛθ + ηᵀθ} dθ = ½ηᵀΛ⁻¹η − ½ log det(Λ/2π)`.
    pub fn log_partition(&self) -> Result<f64> {
        self.require_proper()?;
        let mean = self.precision.solve(&self.shift)?;
        let log_det = self.precision.log_det()?;
        Ok(0.5 * self.shift.dot(&mean) - 0.5 * log_det + 0.5 * self.dim() as f64 * LN_2PI)
    }

    pub fn to_moment(&self) -> Result<MomentGaussian> {
        self.require_proper()?;
        let covariance = self.precision.inverse()?;
        let mean = self.precision.solve(&self.shift)?;
        Ok(MomentGaussian { mean, covariance })
    }

    pub fn from_moment(m: &MomentGaussian) -> Result<NatGaussian> {
        if !m.covariance.is_positive_definite() {
            return Err(FedGviError::NotPositiveDefinite);
        }
        let precision = m.covariance.inverse()?;
        let shift = precision.mul_vec(&m.mean);
        NatGaussian::new(precision, shift)
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        self.require_proper()?;
        self.precision.solve(&self.shift)
    }

    /// Normalised log-density at `theta`.
    pub fn log_pdf(&self, theta: &DVector<f64>) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(FedGviError::DimensionMismatch {
                expected: self.dim(),
                found: theta.len(),
            });
        }
        let a = self.log_partition()?;
        Ok(-0.5 * self.precision.quad_form(theta) + self.shift.dot(theta) - a)
    }

    /// `n` draws as the rows of an `n × dim` matrix; deterministic in `seed`.
    pub fn sample(&self, seed: u64, n: usize) -> Result<DMatrix<f64>> {
        let m = self.to_moment()?;
        let chol = m.covariance.cholesky_factor()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        let mut eps = DVector::zeros(d);
        for i in 0..n {
            for e in eps.iter_mut() {
                *e = StandardNormal.sample(&mut rng);
            }
            let theta = &m.mean + &chol * &eps;
            out.row_mut(i).copy_from(&theta.transpose());
        }
        Ok(out)
    }

    /// Largest absolute difference over the natural parameters `(Λ, η)`.
    /// The log offset is ignored.
    pub fn nat_distance(&self, other: &NatGaussian) -> Result<f64> {
        self.check_dim(other)?;
        let dp = self.precision.sub(&other.precision)?.max_abs();
        let ds = (&self.shift - &other.shift).amax();
        Ok(dp.max(ds))
    }

    /// Equality of the distribution-level parameters `(Λ, η)`.
    pub fn same_distribution(&self, other: &NatGaussian, tol: f64) -> bool {
        self.nat_distance(other).map(|d| d <= tol).unwrap_or(false)
    }

    /// Mean-field projection keeping only the diagonal of the precision.
    pub fn diagonal_part(&self) -> NatGaussian {
        NatGaussian {
            precision: SymMat::diagonal(self.precision.diag()),
            shift: self.shift.clone(),
            log_offset: self.log_offset,
        }
    }
}
