//! Precondition chaining: learn each skill's precondition backwards from the
//! goal, labelling skill `i`'s samples by whether they reach skill `i + 1`'s
//! precondition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::{
    fit_gaussian, sample_neighborhood, GaussianModel, GenerativeClassifier, DECISION_THRESHOLD,
    DEFAULT_NEGATIVE_COMPONENTS, DEFAULT_PRIOR_POSITIVE,
};
use crate::env::{LatchEnv, NominalSkill, ObservationModel, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::par::{map_indexed, mix_seed, rng_for, Exec};

pub const DEFAULT_SAMPLES_PER_SKILL: usize = 150;
pub const DEFAULT_NEIGHBORHOOD_SCALE: f64 = 4.0;
/// Share of the negative set drawn uniformly from the state box.
pub const RANDOM_NEGATIVE_SHARE: f64 = 0.25;
const MIN_LABELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalChain {
    pub skills: Vec<NominalSkill>,
}

impl NominalChain {
    pub fn latch() -> Self {
        NominalChain {
            skills: NominalSkill::CHAIN.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }
}

/// The learned preconditions `rho_1..rho_k`, their positive distributions,
/// and the distribution of goal states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreconditionSet {
    pub preconditions: Vec<GenerativeClassifier>,
    pub positive_dists: Vec<GaussianModel>,
    pub goal_dist: GaussianModel,
    /// Door opening that satisfies the goal.
    pub goal_threshold: f64,
}

impl PreconditionSet {
    pub fn k(&self) -> usize {
        self.preconditions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.preconditions.is_empty() || self.preconditions.len() != self.positive_dists.len() {
            return Err(Error::InvariantViolation(format!(
                "{} preconditions but {} positive distributions",
                self.preconditions.len(),
                self.positive_dists.len()
            )));
        }
        for c in &self.preconditions {
            c.validate()?;
            if c.dim() != FEATURE_DIM {
                return Err(Error::InvariantViolation(format!("classifier dimension {}", c.dim())));
            }
        }
        for g in self.positive_dists.iter().chain(std::iter::once(&self.goal_dist)) {
            g.validate()?;
        }
        if !(self.goal_threshold > 0.0) {
            return Err(Error::InvariantViolation("goal_threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn rho(&self, i: usize, features: &[f64]) -> Result<f64> {
        self.preconditions[i].classify(features)
    }

    pub fn goal(&self, features: &[f64]) -> bool {
        features[FEATURE_DIM - 1] >= self.goal_threshold
    }

    pub fn max_rho(&self, features: &[f64]) -> Result<f64> {
        let mut best: f64 = 0.0;
        for i in 0..self.k() {
            best = best.max(self.rho(i, features)?);
        }
        Ok(best)
    }

    /// No precondition holds and the goal is not reached.
    pub fn all_fail(&self, features: &[f64]) -> Result<bool> {
        Ok(!self.goal(features) && self.max_rho(features)? < DECISION_THRESHOLD)
    }

    /// Index of the satisfied precondition closest to the goal.
    pub fn highest_satisfied(&self, features: &[f64]) -> Result<Option<usize>> {
        for i in (0..self.k()).rev() {
            if self.rho(i, features)? >= DECISION_THRESHOLD {
                return Ok(Some(i));
            }
        }
        Ok(None)
    }

    /// Recovery targets are the `k` preconditions followed by the goal.
    pub fn n_targets(&self) -> usize {
        self.k() + 1
    }

    pub fn target_dist(&self, j: usize) -> &GaussianModel {
        if j < self.k() {
            &self.positive_dists[j]
        } else {
            &self.goal_dist
        }
    }

    /// `rho_j` for a precondition target, the goal indicator for the goal.
    pub fn target_prob(&self, j: usize, features: &[f64]) -> Result<f64> {
        if j < self.k() {
            self.rho(j, features)
        } else if features.len() != FEATURE_DIM {
            Err(Error::DimensionMismatch {
                expected: FEATURE_DIM,
                got: features.len(),
            })
        } else {
            Ok(if self.goal(features) { 1.0 } else { 0.0 })
        }
    }
}

/// Outcome of one labelling rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub skill: usize,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub positive: bool,
}

#[derive(Debug, Clone)]
pub struct ChainingOptions {
    pub samples_per_skill: usize,
    pub scale: f64,
    pub negative_components: usize,
    pub prior_positive: f64,
    pub exec: Exec,
}

impl Default for ChainingOptions {
    fn default() -> Self {
        ChainingOptions {
            samples_per_skill: DEFAULT_SAMPLES_PER_SKILL,
            scale: DEFAULT_NEIGHBORHOOD_SCALE,
            negative_components: DEFAULT_NEGATIVE_COMPONENTS,
            prior_positive: DEFAULT_PRIOR_POSITIVE,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainingResult {
    pub set: PreconditionSet,
    pub labels: Vec<LabelRecord>,
}

/// Runs the chain until `n` episodes succeed. Each trajectory holds the
/// features of every skill's start state followed by the goal state.
pub fn collect_success_trajectories(
    chain: &NominalChain,
    env: &LatchEnv,
    obs_model: ObservationModel,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if chain.is_empty() {
        return Err(Error::EmptyInput("nominal chain"));
    }
    let max_attempts = 10 * n.max(1);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < max_attempts {
        let batch = (n - out.len()).min(max_attempts - attempts);
        let results = map_indexed(batch, exec, |b| {
            let ep_seed = mix_seed(seed, (attempts + b) as u64);
            run_skills(chain, env, obs_model, ep_seed)
        });
        attempts += batch;
        for traj in results.into_iter().flatten() {
            if out.len() < n {
                out.push(traj);
            }
        }
    }
    if out.len() < n {
        return Err(Error::CollectionTimeout {
            successes: out.len(),
            attempts,
        });
    }
    Ok(out)
}

fn run_skills(chain: &NominalChain, env: &LatchEnv, obs_model: ObservationModel, seed: u64) -> Option<Vec<Vec<f64>>> {
    let (mut state, mut est) = env.reset(seed, obs_model);
    let mut rng = rng_for(seed, 0x0b5);
    let mut traj = vec![env.features(&state)];
    for &skill in &chain.skills {
        state = env.execute_skill(&state, skill, est.obs).0;
        est.advance(state.handle_pos_true, &mut rng);
        traj.push(env.features(&state));
    }
    env.goal_predicate(&state).then_some(traj)
}

/// Learns `rho_k, ..., rho_1` backwards from the goal.
pub fn chain_preconditions(
    chain: &NominalChain,
    env: &LatchEnv,
    trajectories: &[Vec<Vec<f64>>],
    opts: &ChainingOptions,
    seed: u64,
) -> Result<ChainingResult> {
    let k = chain.len();
    if trajectories.is_empty() {
        return Err(Error::EmptyInput("trajectories"));
    }
    if let Some(t) = trajectories.iter().find(|t| t.len() != k + 1) {
        return Err(Error::LengthMismatch {
            left: t.len(),
            right: k + 1,
        });
    }
    let column = |i: usize| -> Vec<Vec<f64>> { trajectories.iter().map(|t| t[i].clone()).collect() };
    let positive_dists = (0..k).map(|i| fit_gaussian(&column(i))).collect::<Result<Vec<_>>>()?;
    let goal_dist = fit_gaussian(&column(k))?;
    let goal_threshold = env.config.goal_threshold;

    let mut classifiers: Vec<Option<GenerativeClassifier>> = vec![None; k];
    let mut labels = Vec::new();
    for i in (0..k).rev() {
        let skill_seed = mix_seed(seed, i as u64);
        let starts = sample_neighborhood(&positive_dists[i], opts.scale, opts.samples_per_skill, skill_seed)?;
        let next = classifiers.get(i + 1).and_then(|c| c.as_ref());
        let rollouts = map_indexed(starts.len(), opts.exec, |n| -> Result<LabelRecord> {
            let state = env.from_features(&starts[n])?;
            let start = env.features(&state);
            let (end, _) = env.execute_skill(&state, chain.skills[i], state.handle_pos_true);
            let end = env.features(&end);
            let positive = match next {
                Some(c) => c.classify(&end)? >= DECISION_THRESHOLD,
                None => end[FEATURE_DIM - 1] >= goal_threshold,
            };
            Ok(LabelRecord {
                skill: i,
                start,
                end,
                positive,
            })
        });
        let rollouts = rollouts.into_iter().collect::<Result<Vec<_>>>()?;
        let mut pos: Vec<Vec<f64>> = rollouts.iter().filter(|r| r.positive).map(|r| r.start.clone()).collect();
        let mut neg: Vec<Vec<f64>> = rollouts.iter().filter(|r| !r.positive).map(|r| r.start.clone()).collect();
        if pos.len() < MIN_LABELS || neg.len() < MIN_LABELS {
            return Err(Error::DegenerateLabels {
                skill: i,
                positives: pos.len(),
                negatives: neg.len(),
            });
        }
        let n_random = ((neg.len() as f64) * RANDOM_NEGATIVE_SHARE / (1.0 - RANDOM_NEGATIVE_SHARE)).ceil() as usize;
        let mut rng = rng_for(skill_seed, 0xa11d);
        neg.extend((0..n_random).map(|_| random_world_state(env, &mut rng)));
        pos.extend(column(i));
        let c = GenerativeClassifier::fit(&pos, &neg, opts.negative_components, opts.prior_positive, skill_seed)?;
        classifiers[i] = Some(c);
        labels.extend(rollouts);
    }
    labels.sort_by_key(|r| r.skill);
    let set = PreconditionSet {
        preconditions: classifiers.into_iter().map(|c| c.expect("filled above")).collect(),
        positive_dists,
        goal_dist,
        goal_threshold,
    };
    Ok(ChainingResult { set, labels })
}

/// Uniform draw from the feature-space bounding box.
pub fn random_world_state<R: Rng + ?Sized>(env: &LatchEnv, rng: &mut R) -> Vec<f64> {
    let (lo, hi) = env.config.feature_bounds();
    (0..FEATURE_DIM).map(|d| rng.random_range(lo[d]..=hi[d])).collect()
}
