//! Episodic relative entropy policy search over a Gaussian on parameters.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::classifiers::GaussianModel;
use crate::error::{Error, Result};
use crate::par::{map_slice, rng_for, Exec};

const ETA_MIN: f64 = 1e-8;
const ETA_MAX: f64 = 1e8;
const MAX_REJECTIONS: usize = 100;

/// Search distribution over parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchPolicy(GaussianModel);

impl SearchPolicy {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        Ok(SearchPolicy(GaussianModel::new(mean, covariance)?))
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Ok(SearchPolicy(GaussianModel::isotropic(mean, variance)?))
    }

    pub fn mean(&self) -> &[f64] {
        self.0.mean()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        self.0.covariance()
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0.min_eigenvalue()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepsConfig {
    /// KL bound between the sample weighting and the uniform one.
    pub epsilon: f64,
    pub n_updates: usize,
    pub n_samples_per_update: usize,
    /// Initial per-dimension variance.
    pub init_covariance_scale: f64,
    /// Added to the refitted covariance after every update.
    pub covariance_floor: f64,
    pub exec: Exec,
}

impl Default for RepsConfig {
    fn default() -> Self {
        RepsConfig {
            epsilon: 0.5,
            n_updates: 10,
            n_samples_per_update: 40,
            init_covariance_scale: 0.25 * 0.25,
            covariance_floor: 1e-6,
            exec: Exec::default(),
        }
    }
}

impl RepsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.n_updates == 0 || self.n_samples_per_update < 2 {
            return Err(Error::InvalidArgument("need at least one update of two samples".into()));
        }
        if !(self.init_covariance_scale > 0.0) || !(self.covariance_floor > 0.0) {
            return Err(Error::InvalidArgument("covariance scales must be positive".into()));
        }
        Ok(())
    }
}

/// `g(eta) = eta eps + eta log(mean exp((R - max R) / eta)) + max R`.
pub fn dual(rewards: &[f64], epsilon: f64, eta: f64) -> f64 {
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = rewards.len() as f64;
    let s: f64 = rewards.iter().map(|r| ((r - max) / eta).exp()).sum();
    eta * epsilon + eta * (s / n).ln() + max
}

fn weights_for(rewards: &[f64], eta: f64) -> Vec<f64> {
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = rewards.iter().map(|r| ((r - max) / eta).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// `KL(w || uniform)`.
pub fn kl_to_uniform(weights: &[f64]) -> f64 {
    let n = weights.len() as f64;
    weights.iter().filter(|&&w| w > 0.0).map(|w| w * (w * n).ln()).sum()
}

/// Minimizes the dual over `eta` by golden-section search in `log eta`.
/// Returns the temperature and the sample weights.
pub fn solve_dual(rewards: &[f64], epsilon: f64) -> Result<(f64, Vec<f64>)> {
    if rewards.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: rewards.len(),
        });
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFiniteRewards);
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let g = |log_eta: f64| dual(rewards, epsilon, log_eta.exp());
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (ETA_MIN.ln(), ETA_MAX.ln());
    let mut c = b - invphi * (b - a);
    let mut d = a + invphi * (b - a);
    let (mut gc, mut gd) = (g(c), g(d));
    while b - a > 1e-10 {
        if gc <= gd {
            b = d;
            d = c;
            gd = gc;
            c = b - invphi * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + invphi * (b - a);
            gd = g(d);
        }
    }
    // the bracket ends are admissible too
    let mut log_eta = 0.5 * (a + b);
    for cand in [ETA_MIN.ln(), ETA_MAX.ln()] {
        if g(cand) < g(log_eta) {
            log_eta = cand;
        }
    }
    let mut eta = log_eta.exp();
    let mut w = weights_for(rewards, eta);
    if kl_to_uniform(&w) > epsilon {
        // round-off at the optimum; KL falls as eta grows
        let (mut lo, mut hi) = (log_eta, ETA_MAX.ln());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if kl_to_uniform(&weights_for(rewards, mid.exp())) > epsilon {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        eta = hi.exp();
        w = weights_for(rewards, eta);
    }
    Ok((eta, w))
}

/// Weighted maximum-likelihood refit plus `floor * I`.
pub fn update_policy(samples: &[Vec<f64>], weights: &[f64], floor: f64) -> Result<SearchPolicy> {
    if samples.len() != weights.len() {
        return Err(Error::LengthMismatch {
            left: samples.len(),
            right: weights.len(),
        });
    }
    let d = crate::classifiers::check_rows(samples)?;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument("weights must be non-negative with positive sum".into()));
    }
    let xs: Vec<DVector<f64>> = samples.iter().map(|s| DVector::from_column_slice(s)).collect();
    let mean = xs
        .iter()
        .zip(weights)
        .fold(DVector::zeros(d), |acc, (x, w)| acc + x * (*w / total));
    let mut cov = xs.iter().zip(weights).fold(DMatrix::zeros(d, d), |acc, (x, w)| {
        let diff = x - &mean;
        acc + (&diff * diff.transpose()) * (*w / total)
    });
    for i in 0..d {
        cov[(i, i)] += floor;
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(SearchPolicy(GaussianModel::from_parts(mean, cov)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepsTraceRow {
    pub update: usize,
    pub mean_reward: f64,
    pub best_reward: f64,
    pub eta: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct RepsOutcome {
    pub best_theta: Vec<f64>,
    pub best_reward: f64,
    pub trace: Vec<RepsTraceRow>,
    pub policy: SearchPolicy,
}

/// Runs `n_updates` rounds of sample, evaluate, reweight, refit and returns
/// the best parameters ever evaluated. Samples are kept inside `bounds` by
/// redrawing, then clamping after too many rejections.
pub fn reps_optimize<F>(
    reward_fn: F,
    init: &SearchPolicy,
    bounds: Option<(&[f64], &[f64])>,
    config: &RepsConfig,
    seed: u64,
) -> Result<RepsOutcome>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    config.validate()?;
    let d = init.dim();
    if let Some((lo, hi)) = bounds {
        if lo.len() != d || hi.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: lo.len().min(hi.len()),
            });
        }
    }
    let mut policy = init.clone();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut trace = Vec::with_capacity(config.n_updates);
    for u in 0..config.n_updates {
        let mut rng = rng_for(seed, u as u64);
        let thetas: Vec<Vec<f64>> = (0..config.n_samples_per_update)
            .map(|_| draw_bounded(&policy, bounds, &mut rng))
            .collect();
        let rewards = map_slice(&thetas, config.exec, |t| {
            reward_fn(t).map_err(|e| Error::OracleFailure {
                theta: t.clone(),
                reason: e.to_string(),
            })
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        if let Some(k) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(Error::OracleFailure {
                theta: thetas[k].clone(),
                reason: format!("non-finite reward {}", rewards[k]),
            });
        }
        for (t, &r) in thetas.iter().zip(&rewards) {
            if best.as_ref().is_none_or(|(_, b)| r > *b) {
                best = Some((t.clone(), r));
            }
        }
        let (eta, w) = solve_dual(&rewards, config.epsilon)?;
        policy = update_policy(&thetas, &w, config.covariance_floor)?;
        trace.push(RepsTraceRow {
            update: u,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            best_reward: best.as_ref().map(|b| b.1).unwrap_or(f64::NAN),
            eta,
            kl: kl_to_uniform(&w),
        });
    }
    let (best_theta, best_reward) = best.expect("at least one update");
    Ok(RepsOutcome {
        best_theta,
        best_reward,
        trace,
        policy,
    })
}

fn draw_bounded<R: rand::Rng + ?Sized>(
    policy: &SearchPolicy,
    bounds: Option<(&[f64], &[f64])>,
    rng: &mut R,
) -> Vec<f64> {
    let Some((lo, hi)) = bounds else {
        return policy.0.draw(rng, 1.0);
    };
    let inside = |x: &[f64]| x.iter().enumerate().all(|(k, v)| *v >= lo[k] && *v <= hi[k]);
    let mut x = policy.0.draw(rng, 1.0);
    for _ in 0..MAX_REJECTIONS {
        if inside(&x) {
            return x;
        }
        x = policy.0.draw(rng, 1.0);
    }
    for (k, v) in x.iter_mut().enumerate() {
        *v = v.clamp(lo[k], hi[k]);
    }
    x
}

pub fn write_trace_csv(trace: &[RepsTraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bowl(opt: Vec<f64>) -> impl Fn(&[f64]) -> Result<f64> + Sync + Send {
        move |t: &[f64]| Ok(-t.iter().zip(&opt).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
    }

    #[test]
    fn equal_rewards_give_uniform_weights() {
        let (_, w) = solve_dual(&[3.0; 5], 0.5).unwrap();
        for x in w {
            assert_abs_diff_eq!(x, 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn kl_constraint_is_active_on_spread_rewards() {
        let (_, w) = solve_dual(&[0.0, 100.0], 0.5).unwrap();
        assert_abs_diff_eq!(kl_to_uniform(&w), 0.5, epsilon = 1e-4);
    }

    #[test]
    fn huge_epsilon_selects_the_argmax() {
        let (_, w) = solve_dual(&[1.0, 4.0, 2.0, 3.9], 1e6).unwrap();
        assert!(w[1] > 0.999);
    }

    #[test]
    fn dual_rejects_bad_input() {
        assert!(matches!(solve_dual(&[1.0, f64::NAN], 0.5), Err(Error::NonFiniteRewards)));
        assert!(matches!(solve_dual(&[1.0], 0.5), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn weighted_fit_special_cases() {
        let xs = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let p = update_policy(&xs, &[0.0, 1.0, 0.0], 1e-6).unwrap();
        assert_eq!(p.mean(), &[2.0, 3.0]);
        assert_abs_diff_eq!(p.covariance()[(0, 0)], 1e-6, epsilon = 1e-15);
        assert_abs_diff_eq!(p.covariance()[(0, 1)], 0.0, epsilon = 1e-15);
        let u = update_policy(&xs, &[1.0 / 3.0; 3], 0.0 + 1e-12).unwrap();
        assert_abs_diff_eq!(u.mean()[0], 2.0, epsilon = 1e-12);
        // ML (1/N) variance of {0, 2, 4}
        assert_abs_diff_eq!(u.covariance()[(0, 0)], 8.0 / 3.0, epsilon = 1e-9);
        assert!(matches!(update_policy(&xs, &[1.0], 1e-6), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let opt = vec![0.3, -0.2, 0.1];
        let mut good = 0;
        for seed in 0..10 {
            let init = SearchPolicy::isotropic(opt.iter().map(|o| o + 1.0 / 3f64.sqrt()).collect(), 0.25).unwrap();
            let out = reps_optimize(bowl(opt.clone()), &init, None, &RepsConfig::default(), seed).unwrap();
            for row in &out.trace {
                assert!(row.kl <= 0.5 + 1e-6);
            }
            let dist = out.policy.mean().iter().zip(&opt).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist <= 0.2 && out.best_reward >= -0.05 {
                good += 1;
            }
            let ups = out.trace.windows(2).filter(|w| w[1].mean_reward >= w[0].mean_reward).count();
            assert!(ups >= 8, "seed {seed}: {ups}");
        }
        assert!(good >= 9, "{good}");
    }

    #[test]
    fn constant_reward_does_not_drift() {
        let init = SearchPolicy::isotropic(vec![0.5, 0.5], 0.01).unwrap();
        let out = reps_optimize(|_: &[f64]| Ok(1.0), &init, None, &RepsConfig::default(), 3).unwrap();
        // each update refits on 40 samples; allow three standard errors per step
        let se = (0.01f64 / 40.0).sqrt() * 10f64.sqrt();
        for k in 0..2 {
            assert!((out.policy.mean()[k] - 0.5).abs() < 3.0 * se, "{:?}", out.policy.mean());
        }
    }

    #[test]
    fn samples_respect_bounds_and_failures_carry_theta() {
        let init = SearchPolicy::isotropic(vec![0.9, 0.9], 0.25).unwrap();
        let lo = [0.0, 0.0];
        let hi = [1.0, 1.0];
        let f = |t: &[f64]| {
            assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
            Ok(-t[0])
        };
        reps_optimize(f, &init, Some((&lo, &hi)), &RepsConfig::default(), 0).unwrap();
        let bad = |t: &[f64]| if t[0] > 0.95 { Err(Error::EmptyDataset) } else { Ok(0.0) };
        match reps_optimize(bad, &init, Some((&lo, &hi)), &RepsConfig::default(), 0) {
            Err(Error::OracleFailure { theta, .. }) => assert!(theta[0] > 0.95),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sequential_matches_parallel() {
        let init = SearchPolicy::isotropic(vec![1.0, 1.0, 1.0], 0.25).unwrap();
        let cfg = RepsConfig::default();
        let a = reps_optimize(bowl(vec![0.0; 3]), &init, None, &cfg, 5).unwrap();
        let b = reps_optimize(
            bowl(vec![0.0; 3]),
            &init,
            None,
            &RepsConfig {
                exec: Exec::Sequential,
                ..cfg
            },
            5,
        )
        .unwrap();
        assert_eq!(a.best_theta, b.best_theta);
        assert_eq!(a.trace, b.trace);
    }

    proptest! {
        #[test]
        fn dual_solution_is_feasible_and_minimal(
            rewards in proptest::collection::vec(-50.0f64..50.0, 2..60),
            eps in 0.05f64..3.0,
            probes in proptest::collection::vec(-18.0f64..18.0, 100),
        ) {
            let (eta, w) = solve_dual(&rewards, eps).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            prop_assert!(kl_to_uniform(&w) <= eps + 1e-6);
            let g_star = dual(&rewards, eps, eta);
            for p in probes {
                let g = dual(&rewards, eps, p.exp());
                prop_assert!(g_star <= g + 1e-7 * (1.0 + g.abs()), "{} > {}", g_star, g);
            }
        }

        #[test]
        fn weighted_fit_matches_direct_moments(
            xs in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..20),
            raw in proptest::collection::vec(0.01f64..1.0, 20),
        ) {
            let w: Vec<f64> = raw[..xs.len()].to_vec();
            let s: f64 = w.iter().sum();
            let p = update_policy(&xs, &w, 1e-6).unwrap();
            for a in 0..3 {
                let m: f64 = xs.iter().zip(&w).map(|(x, wi)| wi * x[a]).sum::<f64>() / s;
                prop_assert!((p.mean()[a] - m).abs() < 1e-10);
                for b in 0..3 {
                    let mb: f64 = xs.iter().zip(&w).map(|(x, wi)| wi * x[b]).sum::<f64>() / s;
                    let c: f64 = xs.iter().zip(&w).map(|(x, wi)| wi * (x[a] - m) * (x[b] - mb)).sum::<f64>() / s
                        + if a == b { 1e-6 } else { 0.0 };
                    prop_assert!((p.covariance()[(a, b)] - c).abs() < 1e-10);
                }
            }
            prop_assert!(p.min_eigenvalue() >= 1e-6 * (1.0 - 1e-6));
        }
    }
}
