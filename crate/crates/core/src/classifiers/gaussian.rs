use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::check_rows;
use crate::error::{Error, Result};
use crate::par::rng_for;

/// Relative covariance floor: `eps = REL_FLOOR * trace / d`.
pub(crate) const REL_FLOOR: f64 = 1e-6;
/// Absolute floor for fully degenerate sample sets.
pub(crate) const ABS_FLOOR: f64 = 1e-12;

pub(crate) fn floor_for(trace: f64, d: usize) -> f64 {
    (REL_FLOOR * trace / d as f64).max(ABS_FLOOR)
}

#[derive(Debug, Clone)]
struct Factor {
    lower: DMatrix<f64>,
    log_norm: f64,
}

/// Multivariate normal density. The Cholesky factor is computed on first use.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "GaussianRepr", into = "GaussianRepr")]
pub struct GaussianModel {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    factor: OnceLock<Factor>,
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

impl From<GaussianRepr> for GaussianModel {
    fn from(r: GaussianRepr) -> Self {
        let d = r.mean.len();
        let cov = DMatrix::from_fn(d, d, |i, j| {
            r.covariance
                .get(i)
                .and_then(|row| row.get(j))
                .copied()
                .unwrap_or(f64::NAN)
        });
        GaussianModel {
            mean: DVector::from_vec(r.mean),
            covariance: cov,
            factor: OnceLock::new(),
        }
    }
}

impl From<GaussianModel> for GaussianRepr {
    fn from(g: GaussianModel) -> Self {
        let d = g.dim();
        GaussianRepr {
            mean: g.mean.iter().copied().collect(),
            covariance: (0..d)
                .map(|i| (0..d).map(|j| g.covariance[(i, j)]).collect())
                .collect(),
        }
    }
}

impl PartialEq for GaussianModel {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.covariance == other.covariance
    }
}

impl GaussianModel {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: covariance.len(),
            });
        }
        let g = GaussianModel::from(GaussianRepr { mean, covariance });
        g.validate()?;
        Ok(g)
    }

    pub(crate) fn from_parts(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        GaussianModel {
            mean,
            covariance,
            factor: OnceLock::new(),
        }
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { variance } else { 0.0 }).collect())
            .collect();
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn covariance_rows(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| self.covariance[(i, j)]).collect())
            .collect()
    }

    /// Checks finiteness, symmetry and positive-definiteness.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvariantViolation("zero-dimensional gaussian".into()));
        }
        if self.covariance.nrows() != d || self.covariance.ncols() != d {
            return Err(Error::InvariantViolation("covariance shape".into()));
        }
        if self.mean.iter().chain(self.covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite gaussian parameters".into()));
        }
        let scale = self.covariance.amax().max(f64::MIN_POSITIVE);
        for i in 0..d {
            for j in 0..i {
                if (self.covariance[(i, j)] - self.covariance[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::InvariantViolation("covariance is not symmetric".into()));
                }
            }
        }
        self.factor().map(|_| ())
    }

    fn factor(&self) -> Result<&Factor> {
        if let Some(f) = self.factor.get() {
            return Ok(f);
        }
        let chol = self.covariance.clone().cholesky().ok_or_else(|| {
            Error::InvariantViolation("covariance is not positive-definite".into())
        })?;
        let lower = chol.l();
        let log_det: f64 = 2.0 * lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = self.dim() as f64;
        let f = Factor {
            lower,
            log_norm: -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det),
        };
        Ok(self.factor.get_or_init(|| f))
    }

    /// Exact log-density.
    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let f = self.factor()?;
        let diff = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let y = f
            .lower
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::InvariantViolation("singular factor".into()))?;
        Ok(f.log_norm - 0.5 * y.norm_squared())
    }

    /// Draws one sample using `rng`, with covariance multiplied by `scale`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> Vec<f64> {
        let f = self.factor().expect("validated gaussian");
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &self.mean + (&f.lower * z) * scale.sqrt();
        x.iter().copied().collect()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, 0x6a55);
        (0..n).map(|_| self.draw(&mut rng, 1.0)).collect()
    }

    /// Smallest eigenvalue of the covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        self.covariance
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Maximum-likelihood fit: sample mean, unbiased covariance plus `eps * I`
/// with `eps = 1e-6 * trace / d`.
pub fn fit_gaussian(samples: &[Vec<f64>]) -> Result<GaussianModel> {
    let d = check_rows(samples)?;
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mut mean = DVector::zeros(d);
    for row in samples {
        mean += DVector::from_column_slice(row);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in samples {
        let diff = DVector::from_column_slice(row) - &mean;
        cov += &diff * diff.transpose();
    }
    cov /= (n - 1) as f64;
    let eps = floor_for(cov.trace(), d);
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    Ok(GaussianModel::from_parts(mean, cov))
}

/// Draws `n` states from `N(mean, scale * covariance)`.
pub fn sample_neighborhood(
    model: &GaussianModel,
    scale: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !(scale >= 1.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "neighborhood scale must be finite and >= 1, got {scale}"
        )));
    }
    model.validate()?;
    let mut rng = rng_for(seed, 0x4e16);
    Ok((0..n).map(|_| model.draw(&mut rng, scale)).collect())
}
