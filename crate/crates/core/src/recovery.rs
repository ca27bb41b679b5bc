//! Parameterized recovery skills: kNN regression from failure states to
//! recovery parameters, trained one REPS query at a time.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifiers::{GaussianModel, GenerativeClassifier, DECISION_THRESHOLD};
use crate::discovery::FailureModeSet;
use crate::env::{LatchEnv, WorldState, FEATURE_DIM, THETA_DIM};
use crate::error::{Error, Result};
use crate::par::{map_indexed, mix_seed, rng_for, Exec};
use crate::precondition::PreconditionSet;
use crate::reps::{reps_optimize, RepsConfig, RepsOutcome, SearchPolicy};
use crate::skill_graph::{target_symbol, SymbolId};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_N_EVAL: usize = 50;
pub const LOGPDF_WEIGHT: f64 = 0.1;
pub const PRECONDITION_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub state: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterizedSkill {
    pub dataset: Vec<DataPoint>,
    pub k: usize,
    pub from_mode: usize,
    pub to_symbol: SymbolId,
    /// Per-feature divisor applied before distances are taken.
    pub scale: Vec<f64>,
}

impl ParameterizedSkill {
    pub fn new(from_mode: usize, to_symbol: SymbolId, k: usize, scale: Vec<f64>) -> Self {
        ParameterizedSkill {
            dataset: Vec::new(),
            k,
            from_mode,
            to_symbol,
            scale,
        }
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn push(&mut self, state: Vec<f64>, theta: Vec<f64>) -> Result<()> {
        if state.len() != self.scale.len() {
            return Err(Error::DimensionMismatch {
                expected: self.scale.len(),
                got: state.len(),
            });
        }
        if let Some(first) = self.dataset.first() {
            if first.theta.len() != theta.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.theta.len(),
                    got: theta.len(),
                });
            }
        }
        self.dataset.push(DataPoint { state, theta });
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvariantViolation("k must be positive".into()));
        }
        if self.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvariantViolation("feature scales must be positive".into()));
        }
        let theta_dim = self.dataset.first().map(|p| p.theta.len());
        for p in &self.dataset {
            if p.state.len() != self.scale.len() || Some(p.theta.len()) != theta_dim {
                return Err(Error::InvariantViolation("ragged recovery dataset".into()));
            }
            if p.state.iter().chain(&p.theta).any(|v| !v.is_finite()) {
                return Err(Error::InvariantViolation("non-finite recovery datapoint".into()));
            }
        }
        Ok(())
    }
}

/// Mean parameters of the `k` nearest stored states; distance ties go to
/// the earlier datapoint.
pub fn knn_predict(skill: &ParameterizedSkill, state: &[f64]) -> Result<Vec<f64>> {
    if skill.dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if state.len() != skill.scale.len() {
        return Err(Error::DimensionMismatch {
            expected: skill.scale.len(),
            got: state.len(),
        });
    }
    let mut d: Vec<(f64, usize)> = skill
        .dataset
        .iter()
        .enumerate()
        .map(|(n, p)| {
            let d2: f64 = p
                .state
                .iter()
                .zip(state)
                .zip(&skill.scale)
                .map(|((a, b), s)| ((a - b) / s).powi(2))
                .sum();
            (d2, n)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = skill.k.min(d.len());
    let dim = skill.dataset[0].theta.len();
    let mut out = vec![0.0; dim];
    for &(_, n) in &d[..k] {
        for (o, t) in out.iter_mut().zip(&skill.dataset[n].theta) {
            *o += t / k as f64;
        }
    }
    Ok(out)
}

/// `0.1 log f_{D+}(s) + 10 rho(s)`.
pub fn recovery_reward(
    target_positive: &GaussianModel,
    target_precond: &GenerativeClassifier,
    state: &[f64],
) -> Result<f64> {
    Ok(LOGPDF_WEIGHT * target_positive.logpdf(state)? + PRECONDITION_WEIGHT * target_precond.classify(state)?)
}

/// Reward for recovery target `j`; the goal target scores with the goal
/// distribution and the goal indicator.
pub fn target_reward(preconds: &PreconditionSet, j: usize, state: &[f64]) -> Result<f64> {
    if j < preconds.k() {
        return recovery_reward(&preconds.positive_dists[j], &preconds.preconditions[j], state);
    }
    Ok(LOGPDF_WEIGHT * preconds.goal_dist.logpdf(state)? + PRECONDITION_WEIGHT * preconds.target_prob(j, state)?)
}

/// All `n_modes x n_targets` recovery skills and their success estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryLibrary {
    pub n_modes: usize,
    pub n_targets: usize,
    /// Row-major over `(mode, target)`.
    pub skills: Vec<ParameterizedSkill>,
    pub q: Vec<Vec<f64>>,
}

impl RecoveryLibrary {
    /// Empty library; targets are `n_targets - 1` safe symbols and the goal.
    pub fn new(n_modes: usize, n_targets: usize, k: usize, scale: Vec<f64>) -> Self {
        let n_safe = n_targets.saturating_sub(1);
        let skills = (0..n_modes)
            .flat_map(|i| (0..n_targets).map(move |j| (i, j)))
            .map(|(i, j)| ParameterizedSkill::new(i, target_symbol(j, n_safe), k, scale.clone()))
            .collect();
        RecoveryLibrary {
            n_modes,
            n_targets,
            skills,
            q: vec![vec![0.0; n_targets]; n_modes],
        }
    }

    pub fn skill(&self, i: usize, j: usize) -> &ParameterizedSkill {
        &self.skills[i * self.n_targets + j]
    }

    pub fn skill_mut(&mut self, i: usize, j: usize) -> &mut ParameterizedSkill {
        &mut self.skills[i * self.n_targets + j]
    }

    pub fn total_datapoints(&self) -> usize {
        self.skills.iter().map(|s| s.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.skills.len() != self.n_modes * self.n_targets || self.q.len() != self.n_modes {
            return Err(Error::InvariantViolation("recovery library shape".into()));
        }
        for row in &self.q {
            if row.len() != self.n_targets || row.iter().any(|q| !(0.0..=1.0).contains(q)) {
                return Err(Error::InvariantViolation("q entries must lie in [0, 1]".into()));
            }
        }
        for (n, s) in self.skills.iter().enumerate() {
            if s.from_mode != n / self.n_targets.max(1) {
                return Err(Error::InvariantViolation(format!("skill {n} has from_mode {}", s.from_mode)));
            }
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub k: usize,
    pub n_eval: usize,
    /// Handle observation noise during recovery training and evaluation.
    pub obs_sigma: f64,
    /// Initial REPS mean of the gripper parameters.
    pub init_gripper: f64,
    pub reps: RepsConfig,
    pub exec: Exec,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            k: DEFAULT_K,
            n_eval: DEFAULT_N_EVAL,
            obs_sigma: 0.01,
            init_gripper: 0.5,
            reps: RepsConfig::default(),
            exec: Exec::default(),
        }
    }
}

/// Draws a start state from failure mode `i`.
pub fn sample_mode_state<R: Rng + ?Sized>(
    env: &LatchEnv,
    modes: &FailureModeSet,
    i: usize,
    rng: &mut R,
) -> Result<WorldState> {
    let c = modes
        .gmm
        .components
        .get(i)
        .ok_or_else(|| Error::InvalidArgument(format!("no failure mode {i}")))?;
    env.from_features(&c.draw(rng, 1.0))
}

fn observe<R: Rng + ?Sized>(truth: [f64; 2], sigma: f64, rng: &mut R) -> [f64; 2] {
    if sigma == 0.0 {
        return truth;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    [truth[0] + n.sample(rng), truth[1] + n.sample(rng)]
}

fn initial_policy(env: &LatchEnv, cfg: &RecoveryConfig) -> Result<SearchPolicy> {
    let (lo, _) = env.config.theta_bounds();
    let mean = lo.iter().map(|&l| if l == 0.0 { cfg.init_gripper } else { 0.0 }).collect();
    SearchPolicy::isotropic(mean, cfg.reps.init_covariance_scale)
}

/// One REPS query: samples a start in mode `i`, optimizes recovery
/// parameters toward target `j` and appends the pair to skill `(i, j)`.
#[allow(clippy::too_many_arguments)]
pub fn train_recovery_datapoint(
    library: &mut RecoveryLibrary,
    i: usize,
    j: usize,
    env: &LatchEnv,
    modes: &FailureModeSet,
    preconds: &PreconditionSet,
    cfg: &RecoveryConfig,
    seed: u64,
) -> Result<RepsOutcome> {
    if i >= library.n_modes || j >= library.n_targets || j >= preconds.n_targets() {
        return Err(Error::InvalidArgument(format!("no recovery ({i}, {j})")));
    }
    let mut rng = rng_for(seed, 0x5ea7);
    let start = sample_mode_state(env, modes, i, &mut rng)?;
    let h_obs = observe(start.handle_pos_true, cfg.obs_sigma, &mut rng);
    let reward = |theta: &[f64]| -> Result<f64> {
        let (end, _) = env.execute_theta(&start, theta, h_obs)?;
        target_reward(preconds, j, &env.features(&end))
    };
    let (lo, hi) = env.config.theta_bounds();
    let reps_cfg = RepsConfig {
        exec: cfg.exec,
        ..cfg.reps.clone()
    };
    let out = reps_optimize(
        reward,
        &initial_policy(env, cfg)?,
        Some((&lo, &hi)),
        &reps_cfg,
        mix_seed(seed, 1),
    )?;
    library.skill_mut(i, j).push(env.features(&start), out.best_theta.clone())?;
    Ok(out)
}

/// Fraction of `n_eval` fresh starts in the skill's mode that end inside
/// target `j`. An untrained skill scores 0.
#[allow(clippy::too_many_arguments)]
pub fn estimate_success_rate(
    skill: &ParameterizedSkill,
    j: usize,
    env: &LatchEnv,
    modes: &FailureModeSet,
    preconds: &PreconditionSet,
    n_eval: usize,
    obs_sigma: f64,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    if skill.is_empty() || n_eval == 0 {
        return Ok(0.0);
    }
    let outcomes = map_indexed(n_eval, exec, |n| -> Result<bool> {
        let mut rng = rng_for(seed, n as u64);
        let start = sample_mode_state(env, modes, skill.from_mode, &mut rng)?;
        let h_obs = observe(start.handle_pos_true, obs_sigma, &mut rng);
        let theta = knn_predict(skill, &env.features_with_mount(&start, h_obs))?;
        let (end, _) = env.execute_theta(&start, &clamp_theta(env, &theta), h_obs)?;
        Ok(preconds.target_prob(j, &env.features(&end))? >= DECISION_THRESHOLD)
    });
    let mut hits = 0usize;
    for o in outcomes {
        hits += o? as usize;
    }
    Ok(hits as f64 / n_eval as f64)
}

/// Averaged kNN parameters stay in bounds up to rounding; clamp the rest.
pub fn clamp_theta(env: &LatchEnv, theta: &[f64]) -> Vec<f64> {
    let (lo, hi) = env.config.theta_bounds();
    theta
        .iter()
        .enumerate()
        .map(|(k, t)| if k < THETA_DIM { t.clamp(lo[k], hi[k]) } else { *t })
        .collect()
}

/// Feature scaling used by the library's nearest-neighbour search.
pub fn default_scale(env: &LatchEnv) -> Vec<f64> {
    env.config.feature_scale()[..FEATURE_DIM].to_vec()
}
