use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gaussian::floor_for;
use super::{check_rows, log_sum_exp, GaussianModel};
use crate::error::{Error, Result};
use crate::par::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub n_components: usize,
    pub max_iter: usize,
    /// Stop once the mean per-sample log-likelihood improves by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl EmOptions {
    pub fn new(n_components: usize, seed: u64) -> Self {
        EmOptions {
            n_components,
            max_iter: 300,
            tol: 1e-8,
            seed,
        }
    }
}

const MAX_RESEEDS: usize = 3;

impl GmmModel {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianModel>) -> Result<Self> {
        let m = GmmModel { weights, components };
        m.validate()?;
        Ok(m)
    }

    pub fn single(component: GaussianModel) -> Self {
        GmmModel {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, GaussianModel::dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() || self.weights.len() != self.components.len() {
            return Err(Error::InvariantViolation(format!(
                "{} weights for {} components",
                self.weights.len(),
                self.components.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvariantViolation("negative mixture weight".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvariantViolation(format!("mixture weights sum to {sum}")));
        }
        let d = self.dim();
        for c in &self.components {
            if c.dim() != d {
                return Err(Error::InvariantViolation("component dimensions differ".into()));
            }
            c.validate()?;
        }
        Ok(())
    }

    /// Per-component `log(w_k) + log N(x | k)`.
    pub fn weighted_log_densities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| Ok(w.ln() + c.logpdf(x)?))
            .collect()
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.weighted_log_densities(x)?))
    }

    /// Posterior component probabilities; sums to one.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let lp = self.weighted_log_densities(x)?;
        let total = log_sum_exp(&lp);
        if !total.is_finite() {
            let k = lp.len() as f64;
            return Ok(vec![1.0 / k; lp.len()]);
        }
        Ok(lp.iter().map(|l| (l - total).exp()).collect())
    }

    pub(crate) fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        self.components[pick].draw(rng, 1.0)
    }
}

pub fn gmm_logpdf(model: &GmmModel, x: &[f64]) -> Result<f64> {
    model.logpdf(x)
}

/// Draws `n` points: component by weight, then a Gaussian draw.
pub fn gmm_sample(model: &GmmModel, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, 0x9a3b);
    (0..n).map(|_| model.draw(&mut rng)).collect()
}

pub fn fit_gmm(samples: &[Vec<f64>], opts: &EmOptions) -> Result<GmmModel> {
    fit_gmm_traced(samples, opts).map(|(m, _)| m)
}

/// EM fit returning the model and the mean log-likelihood after every E-step.
///
/// Components share a covariance floor of `1e-6 * trace(data cov) / d`.
pub fn fit_gmm_traced(samples: &[Vec<f64>], opts: &EmOptions) -> Result<(GmmModel, Vec<f64>)> {
    let d = check_rows(samples)?;
    let n = samples.len();
    let k = opts.n_components;
    if k == 0 {
        return Err(Error::InvalidArgument("n_components must be positive".into()));
    }
    if n < k {
        return Err(Error::TooFewSamples { needed: k, got: n });
    }
    let xs: Vec<DVector<f64>> = samples.iter().map(|r| DVector::from_column_slice(r)).collect();
    let global_mean = xs.iter().fold(DVector::zeros(d), |acc, x| acc + x) / n as f64;
    let mut global_cov = xs.iter().fold(DMatrix::zeros(d, d), |acc, x| {
        let diff = x - &global_mean;
        acc + &diff * diff.transpose()
    }) / (n.max(2) - 1) as f64;
    let eps = floor_for(global_cov.trace(), d);
    for i in 0..d {
        global_cov[(i, i)] += eps;
    }

    let mut rng = rng_for(opts.seed, 0xe3);
    let centers = kmeans_pp(&xs, k, &mut rng);
    // hard assignment to nearest seed gives the first M-step
    let mut resp = DMatrix::<f64>::zeros(n, k);
    for (i, x) in xs.iter().enumerate() {
        let best = (0..k)
            .min_by(|&a, &b| {
                (x - &centers[a])
                    .norm_squared()
                    .total_cmp(&(x - &centers[b]).norm_squared())
            })
            .unwrap();
        resp[(i, best)] = 1.0;
    }

    let mut reseeds = vec![0usize; k];
    let mut model = m_step(&xs, &resp, eps, &global_cov, &mut reseeds, &mut rng)?;
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..opts.max_iter {
        let ll = e_step(&model, samples, &mut resp)?;
        trace.push(ll);
        if (ll - prev).abs() < opts.tol {
            break;
        }
        prev = ll;
        model = m_step(&xs, &resp, eps, &global_cov, &mut reseeds, &mut rng)?;
    }
    Ok((model, trace))
}

fn kmeans_pp<R: Rng + ?Sized>(xs: &[DVector<f64>], k: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let n = xs.len();
    let mut centers = vec![xs[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = xs.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = xs[idx].clone();
        for (d, x) in dist.iter_mut().zip(xs) {
            *d = d.min((x - &c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

fn e_step(model: &GmmModel, samples: &[Vec<f64>], resp: &mut DMatrix<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (i, x) in samples.iter().enumerate() {
        let lp = model.weighted_log_densities(x)?;
        let norm = log_sum_exp(&lp);
        total += norm;
        for (j, l) in lp.iter().enumerate() {
            resp[(i, j)] = (l - norm).exp();
        }
    }
    Ok(total / samples.len() as f64)
}

fn m_step<R: Rng + ?Sized>(
    xs: &[DVector<f64>],
    resp: &DMatrix<f64>,
    eps: f64,
    global_cov: &DMatrix<f64>,
    reseeds: &mut [usize],
    rng: &mut R,
) -> Result<GmmModel> {
    let n = xs.len();
    let k = resp.ncols();
    let d = xs[0].len();
    let mut weights = Vec::with_capacity(k);
    let mut comps = Vec::with_capacity(k);
    for j in 0..k {
        let nk: f64 = resp.column(j).sum();
        if nk < 1e-8 * n as f64 {
            reseeds[j] += 1;
            if reseeds[j] > MAX_RESEEDS {
                return Err(Error::EmptyComponent { component: j });
            }
            let mean = xs[rng.random_range(0..n)].clone();
            weights.push(1.0 / n as f64);
            comps.push(GaussianModel::from_parts(mean, global_cov.clone()));
            continue;
        }
        let mean = xs
            .iter()
            .enumerate()
            .fold(DVector::zeros(d), |acc, (i, x)| acc + x * resp[(i, j)])
            / nk;
        let mut cov = xs.iter().enumerate().fold(DMatrix::zeros(d, d), |acc, (i, x)| {
            let diff = x - &mean;
            acc + (&diff * diff.transpose()) * resp[(i, j)]
        }) / nk;
        clip_eigenvalues(&mut cov, eps);
        weights.push(nk / n as f64);
        comps.push(GaussianModel::from_parts(mean, cov));
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(GmmModel {
        weights,
        components: comps,
    })
}

/// Constrained ML covariance: eigenvalues below `eps` are raised to `eps`.
/// Unlike adding `eps * I` this is the exact maximizer over `cov >= eps * I`,
/// which keeps EM monotone.
fn clip_eigenvalues(cov: &mut DMatrix<f64>, eps: f64) {
    let sym = (&*cov + cov.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= eps) {
        *cov = sym;
        return;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(eps));
    let v = &eig.eigenvectors;
    *cov = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    *cov = (&*cov + cov.transpose()) * 0.5;
}
