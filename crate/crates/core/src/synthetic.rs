//! Synthetic allocation testbed: every recovery follows a latent learning
//! curve, so the allocator can be exercised without the simulator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{run_allocation, AllocationResult, AllocatorConfig, RecoveryTrainer, Strategy};
use crate::error::{Error, Result};
use crate::par::rng_for;
use crate::skill_graph::{SymbolicGraph, C_FAIL_COST_MULTIPLE, DEFAULT_GAMMA};

pub const DEFAULT_NOISE: f64 = 0.05;

/// `q(t) = q_max (1 - exp(-t / tau))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCurve {
    pub q_max: f64,
    pub tau: f64,
}

impl SyntheticCurve {
    pub fn new(q_max: f64, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q_max) {
            return Err(Error::InvalidProbability(q_max));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        Ok(SyntheticCurve { q_max, tau })
    }

    pub fn value(&self, trainings: usize) -> f64 {
        self.q_max * (1.0 - (-(trainings as f64) / self.tau).exp())
    }
}

/// Ranges of the seeded curve-set generator. Each mode gets one promising
/// recovery; the rest learn slowly toward a low ceiling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveSetSpec {
    pub n_modes: usize,
    pub n_targets: usize,
    pub good_q_max: (f64, f64),
    pub poor_q_max: (f64, f64),
    pub tau: (f64, f64),
    pub size: (f64, f64),
}

impl Default for CurveSetSpec {
    fn default() -> Self {
        CurveSetSpec {
            n_modes: 5,
            n_targets: 4,
            good_q_max: (0.6, 0.95),
            poor_q_max: (0.0, 0.3),
            tau: (2.0, 10.0),
            size: (0.5, 1.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub curves: Vec<Vec<SyntheticCurve>>,
    pub sizes: Vec<f64>,
}

pub fn generate_curve_set(spec: &CurveSetSpec, seed: u64) -> Result<CurveSet> {
    if spec.n_modes == 0 || spec.n_targets == 0 {
        return Err(Error::EmptyInput("curve set"));
    }
    let mut rng = rng_for(seed, 0xc0e5);
    let mut draw = |r: (f64, f64)| if r.0 < r.1 { rng.random_range(r.0..r.1) } else { r.0 };
    let mut curves = Vec::with_capacity(spec.n_modes);
    let mut sizes = Vec::with_capacity(spec.n_modes);
    for _ in 0..spec.n_modes {
        let good = draw((0.0, spec.n_targets as f64)).floor() as usize;
        let row = (0..spec.n_targets)
            .map(|j| {
                let range = if j == good { spec.good_q_max } else { spec.poor_q_max };
                let q_max = draw(range);
                let tau = draw(spec.tau);
                SyntheticCurve::new(q_max, tau)
            })
            .collect::<Result<Vec<_>>>()?;
        curves.push(row);
        sizes.push(draw(spec.size));
    }
    Ok(CurveSet { curves, sizes })
}

/// Trainer that advances a curve per training and reports its value plus
/// uniform noise in `[-noise, noise]`, clipped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SyntheticTrainer {
    pub curves: Vec<Vec<SyntheticCurve>>,
    pub trainings: Vec<Vec<usize>>,
    pub noise: f64,
}

impl SyntheticTrainer {
    pub fn new(curves: Vec<Vec<SyntheticCurve>>, noise: f64) -> Self {
        let trainings = curves.iter().map(|r| vec![0; r.len()]).collect();
        SyntheticTrainer {
            curves,
            trainings,
            noise,
        }
    }
}

impl RecoveryTrainer for SyntheticTrainer {
    fn train(&mut self, i: usize, j: usize, _seed: u64) -> Result<()> {
        self.trainings[i][j] += 1;
        Ok(())
    }

    fn estimate(&mut self, i: usize, j: usize, seed: u64) -> Result<f64> {
        let q = self.curves[i][j].value(self.trainings[i][j]);
        let e = if self.noise > 0.0 {
            rng_for(seed, 0).random_range(-self.noise..=self.noise)
        } else {
            0.0
        };
        Ok((q + e).clamp(0.0, 1.0))
    }
}

/// Recovery graph over a chain with the given nominal costs and
/// `c_fail = 100 x` the largest cost.
pub fn synthetic_graph(n_modes: usize, nominal_costs: &[f64]) -> Result<SymbolicGraph> {
    let max = nominal_costs.iter().copied().fold(0.0, f64::max);
    let q = vec![vec![0.0; nominal_costs.len() + 1]; n_modes];
    SymbolicGraph::recovery_graph(nominal_costs, &q, 0.0, C_FAIL_COST_MULTIPLE * max, DEFAULT_GAMMA)
}

pub fn run_synthetic(
    strategy: Strategy,
    set: &CurveSet,
    nominal_costs: &[f64],
    config: &AllocatorConfig,
    noise: f64,
    seed: u64,
) -> Result<AllocationResult> {
    let graph = synthetic_graph(set.curves.len(), nominal_costs)?;
    if set.curves.iter().any(|r| r.len() != nominal_costs.len() + 1) {
        return Err(Error::LengthMismatch {
            left: set.curves[0].len(),
            right: nominal_costs.len() + 1,
        });
    }
    let mut trainer = SyntheticTrainer::new(set.curves.clone(), noise);
    run_allocation(strategy, &mut trainer, &graph, &set.sizes, config, seed)
}

/// First round count (1-based) at which `trace` reaches `target`.
pub fn rounds_to_reach(trace: &[f64], target: f64) -> Option<usize> {
    trace.iter().position(|&v| v >= target).map(|r| r + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const COSTS: [f64; 3] = [1.0, 1.0, 1.0];

    #[test]
    fn curve_shape() {
        let c = SyntheticCurve::new(0.8, 2.0).unwrap();
        assert_eq!(c.value(0), 0.0);
        assert_abs_diff_eq!(c.value(2), 0.8 * (1.0 - (-1.0f64).exp()), epsilon = 1e-15);
        assert!(SyntheticCurve::new(1.2, 1.0).is_err());
        assert!(SyntheticCurve::new(0.5, 0.0).is_err());
    }

    #[test]
    fn generator_is_seeded() {
        let spec = CurveSetSpec::default();
        assert_eq!(generate_curve_set(&spec, 3).unwrap(), generate_curve_set(&spec, 3).unwrap());
        assert_ne!(generate_curve_set(&spec, 3).unwrap(), generate_curve_set(&spec, 4).unwrap());
        let s = generate_curve_set(&spec, 3).unwrap();
        assert_eq!(s.curves.len(), 5);
        assert!(s.curves.iter().all(|r| r.len() == 4));
    }

    fn dominant_set() -> CurveSet {
        let mut curves = vec![vec![SyntheticCurve::new(0.05, 3.0).unwrap(); 4]; 5];
        curves[2][3] = SyntheticCurve::new(0.9, 3.0).unwrap();
        CurveSet {
            curves,
            sizes: vec![1.0; 5],
        }
    }

    #[test]
    fn dominant_curve_is_trained_first_and_most() {
        let set = dominant_set();
        let cfg = AllocatorConfig {
            budget: 100,
            ..AllocatorConfig::default()
        };
        let exact = run_synthetic(Strategy::ValueUcl, &set, &COSTS, &cfg, 0.0, 0).unwrap();
        assert!(exact.rows[40..50].iter().all(|r| (r.i, r.j) == (2, 3)));
        let mut post = vec![0usize; 20];
        for r in &exact.rows[40..] {
            post[r.i * 4 + r.j] += 1;
        }
        let dom = post[2 * 4 + 3];
        assert!(post.iter().enumerate().all(|(n, &c)| n == 11 || c < dom), "{post:?}");
    }

    #[test]
    fn identical_curves_stay_between_oracle_bounds() {
        let curve = SyntheticCurve::new(0.5, 4.0).unwrap();
        let set = CurveSet {
            curves: vec![vec![curve; 4]; 5],
            sizes: vec![1.0; 5],
        };
        let cfg = AllocatorConfig {
            budget: 100,
            ..AllocatorConfig::default()
        };
        let rr = run_synthetic(Strategy::RoundRobin, &set, &COSTS, &cfg, 0.0, 0).unwrap();
        let ucl = run_synthetic(Strategy::ValueUcl, &set, &COSTS, &cfg, 0.0, 0).unwrap();
        let g = synthetic_graph(5, &COSTS).unwrap();
        // round-robin gives every recovery exactly five trainings
        let five = crate::allocator::failure_value_of(&g, &set.sizes, &vec![vec![curve.value(5); 4]; 5]).unwrap();
        let ceiling = crate::allocator::failure_value_of(&g, &set.sizes, &vec![vec![0.5; 4]; 5]).unwrap();
        assert_abs_diff_eq!(rr.final_fv(), five, epsilon = 1e-9);
        assert!(ucl.final_fv() >= rr.final_fv() - 1e-9);
        assert!(ucl.final_fv() <= ceiling + 1e-9);
    }

    #[test]
    fn value_ucl_concentrates_its_budget() {
        let cfg = AllocatorConfig {
            budget: 100,
            ..AllocatorConfig::default()
        };
        for seed in 0..5 {
            let set = generate_curve_set(&CurveSetSpec::default(), seed).unwrap();
            let res = run_synthetic(Strategy::ValueUcl, &set, &COSTS, &cfg, DEFAULT_NOISE, seed).unwrap();
            let mut post = vec![0usize; 20];
            for r in &res.rows[40..] {
                post[r.i * 4 + r.j] += 1;
            }
            post.sort_unstable_by(|a, b| b.cmp(a));
            let top3: usize = post[..3].iter().sum();
            assert!(top3 * 2 >= 60, "seed {seed}: {post:?}");
            let rr = run_synthetic(Strategy::RoundRobin, &set, &COSTS, &cfg, DEFAULT_NOISE, seed).unwrap();
            assert!(rr.state.train_counts.iter().flatten().all(|&c| c == 5));
        }
    }

    #[test]
    fn reach_round() {
        assert_eq!(rounds_to_reach(&[-3.0, -2.0, -1.0], -2.0), Some(2));
        assert_eq!(rounds_to_reach(&[-3.0], 0.0), None);
    }

    proptest! {
        #[test]
        fn curves_are_monotone_from_zero(q_max in 0.0f64..1.0, tau in 0.1f64..50.0, t in 0usize..200) {
            let c = SyntheticCurve::new(q_max, tau).unwrap();
            prop_assert_eq!(c.value(0), 0.0);
            prop_assert!(c.value(t + 1) >= c.value(t));
            prop_assert!(c.value(t) <= q_max);
        }

        #[test]
        fn estimates_stay_within_the_noise_band(seed in 0u64..1000, t in 0usize..30) {
            let c = SyntheticCurve::new(0.7, 5.0).unwrap();
            let mut tr = SyntheticTrainer::new(vec![vec![c]], 0.05);
            for _ in 0..t {
                tr.train(0, 0, 0).unwrap();
            }
            let e = tr.estimate(0, 0, seed).unwrap();
            prop_assert!((e - c.value(t)).abs() <= 0.05 + 1e-12);
            prop_assert!((0.0..=1.0).contains(&e));
        }
    }
}
