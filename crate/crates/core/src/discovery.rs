//! Failure discovery and failure-mode clustering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifiers::{fit_gmm, EmOptions, GmmModel};
use crate::env::{LatchEnv, ObservationMode, ObservationModel, WorldState, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::par::{map_indexed, mix_seed, rng_for, Exec};
use crate::precondition::{NominalChain, PreconditionSet};

pub const DEFAULT_PESSIMISTIC_MODES: usize = 6;
pub const DEFAULT_EARLY_TERMINATION_MODES: usize = 5;
/// Pessimistic discovery noise relative to the reference noise.
pub const PESSIMISTIC_NOISE_SCALE: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryStrategy {
    Pessimistic,
    EarlyTermination,
}

impl DiscoveryStrategy {
    pub fn default_modes(self) -> usize {
        match self {
            DiscoveryStrategy::Pessimistic => DEFAULT_PESSIMISTIC_MODES,
            DiscoveryStrategy::EarlyTermination => DEFAULT_EARLY_TERMINATION_MODES,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            DiscoveryStrategy::Pessimistic => "pessimistic",
            DiscoveryStrategy::EarlyTermination => "early_termination",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "pessimistic" => Ok(DiscoveryStrategy::Pessimistic),
            "early_termination" => Ok(DiscoveryStrategy::EarlyTermination),
            other => Err(Error::Schema(format!("unknown discovery strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    /// Features of the true state.
    pub true_state: Vec<f64>,
    /// Handle observation in use when the failure happened.
    pub observation_at_failure: Vec<f64>,
    pub skill_index: usize,
    pub strategy: DiscoveryStrategy,
}

impl FailureRecord {
    /// Checks that the record fails every precondition and the goal.
    pub fn verify(&self, preconds: &PreconditionSet) -> Result<bool> {
        preconds.all_fail(&self.true_state)
    }
}

/// Runs the chain open-loop on one frozen noisy observation and records the
/// true state after every skill that leaves all preconditions unsatisfied.
pub fn discover_pessimistic(
    chain: &NominalChain,
    env: &LatchEnv,
    preconds: &PreconditionSet,
    n_episodes: usize,
    noise_sigma: f64,
    seed: u64,
    exec: Exec,
) -> Result<Vec<FailureRecord>> {
    let obs_model = ObservationModel::new(noise_sigma, ObservationMode::OpenLoopFrozen)?;
    let per_episode = map_indexed(n_episodes, exec, |e| -> Result<Vec<FailureRecord>> {
        let (mut state, est) = env.reset(mix_seed(seed, e as u64), obs_model);
        let mut out = Vec::new();
        for (k, &skill) in chain.skills.iter().enumerate() {
            state = env.execute_skill(&state, skill, est.obs).0;
            let f = env.features(&state);
            if preconds.all_fail(&f)? {
                out.push(FailureRecord {
                    true_state: f,
                    observation_at_failure: est.obs.to_vec(),
                    skill_index: k,
                    strategy: DiscoveryStrategy::Pessimistic,
                });
            }
        }
        Ok(out)
    });
    flatten(per_episode)
}

/// Runs the chain under `obs_model` and stops at the first state that fails
/// every precondition, recording it.
pub fn discover_early_termination(
    chain: &NominalChain,
    env: &LatchEnv,
    preconds: &PreconditionSet,
    obs_model: ObservationModel,
    n_episodes: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<FailureRecord>> {
    let per_episode = map_indexed(n_episodes, exec, |e| -> Result<Vec<FailureRecord>> {
        let ep_seed = mix_seed(seed, e as u64);
        let (mut state, mut est) = env.reset(ep_seed, obs_model);
        let mut rng = rng_for(ep_seed, 0x0b5);
        for (k, &skill) in chain.skills.iter().enumerate() {
            let obs = est.obs;
            state = env.execute_skill(&state, skill, obs).0;
            est.advance(state.handle_pos_true, &mut rng);
            let f = env.features(&state);
            if preconds.all_fail(&f)? {
                return Ok(vec![FailureRecord {
                    true_state: f,
                    observation_at_failure: obs.to_vec(),
                    skill_index: k,
                    strategy: DiscoveryStrategy::EarlyTermination,
                }]);
            }
        }
        Ok(Vec::new())
    });
    flatten(per_episode)
}

fn flatten(v: Vec<Result<Vec<FailureRecord>>>) -> Result<Vec<FailureRecord>> {
    let mut out = Vec::new();
    for r in v {
        out.extend(r?);
    }
    Ok(out)
}

/// Distance from the end-effector to the handle's grip point.
pub fn distance_to_handle(env: &LatchEnv, record: &FailureRecord) -> Result<f64> {
    let s: WorldState = env.from_features(&record.true_state)?;
    let g = env.grip_point(&s);
    Ok((s.ee_pos[0] - g[0]).hypot(s.ee_pos[1] - g[1]))
}

/// Failure modes: a mixture over true failure states and the mass `alpha_i`
/// of every mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureModeSet {
    pub gmm: GmmModel,
    pub sizes: Vec<f64>,
}

impl FailureModeSet {
    pub fn n_modes(&self) -> usize {
        self.sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.gmm.validate()?;
        if self.sizes.len() != self.gmm.n_components() {
            return Err(Error::InvariantViolation(format!(
                "{} sizes for {} components",
                self.sizes.len(),
                self.gmm.n_components()
            )));
        }
        if self.sizes.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::InvariantViolation("mode sizes must be positive".into()));
        }
        Ok(())
    }
}

pub fn cluster_failures(records: &[FailureRecord], n_modes: usize, seed: u64) -> Result<FailureModeSet> {
    if records.len() < n_modes.max(1) {
        return Err(Error::TooFewSamples {
            needed: n_modes.max(1),
            got: records.len(),
        });
    }
    let xs: Vec<Vec<f64>> = records.iter().map(|r| r.true_state.clone()).collect();
    let gmm = fit_gmm(&xs, &EmOptions::new(n_modes, seed))?;
    let n = records.len() as f64;
    let sizes = gmm.weights.iter().map(|w| n * w).collect();
    let set = FailureModeSet { gmm, sizes };
    set.validate()?;
    Ok(set)
}

/// Most responsible mode; ties go to the lowest index.
pub fn classify_failure(modes: &FailureModeSet, state: &[f64]) -> Result<usize> {
    let r = modes.gmm.responsibilities(state)?;
    let mut best = 0;
    for (i, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn write_records_csv(records: &[FailureRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..FEATURE_DIM).map(|k| format!("s{k}")).collect();
    header.extend(["o0".into(), "o1".into(), "skill_index".into(), "strategy".into()]);
    w.write_record(&header)?;
    for r in records {
        let mut row: Vec<String> = r.true_state.iter().map(|v| v.to_string()).collect();
        row.extend(r.observation_at_failure.iter().map(|v| v.to_string()));
        row.push(r.skill_index.to_string());
        row.push(r.strategy.tag().into());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<FailureRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        if row.len() != FEATURE_DIM + 4 {
            return Err(Error::Schema(format!("failure row has {} fields", row.len())));
        }
        let num = |k: usize| -> Result<f64> {
            row[k]
                .parse::<f64>()
                .map_err(|e| Error::Schema(format!("field {k}: {e}")))
        };
        out.push(FailureRecord {
            true_state: (0..FEATURE_DIM).map(num).collect::<Result<_>>()?,
            observation_at_failure: vec![num(FEATURE_DIM)?, num(FEATURE_DIM + 1)?],
            skill_index: row[FEATURE_DIM + 2]
                .parse()
                .map_err(|e| Error::Schema(format!("skill_index: {e}")))?,
            strategy: DiscoveryStrategy::parse(&row[FEATURE_DIM + 3])?,
        });
    }
    Ok(out)
}
