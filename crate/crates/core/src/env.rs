//! Latch world: a point end-effector grasps a handle, rotates it and pulls a
//! door open, with the handle's position observed through Gaussian noise.
//!
//! The handle is a one-dimensional mechanism. Its travel `u` runs from 0 to
//! `rot_travel + pull_travel`; the first `rot_travel` rotates the handle to
//! `angle_max`, the rest opens the door. The grip point sits at
//! `mount - (0, u)`. While grasped the end-effector follows the grip point
//! and lateral commands are ignored. The door ratchets: it never closes.
//!
//! Learners never see the mount position. They see a 7-number feature
//! vector `[ee_x, ee_y, gripper, off_x, off_y, angle, door]` where `off` is
//! the end-effector offset from the grip point.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::rng_for;

pub const FEATURE_DIM: usize = 7;
/// Recovery parameters: three waypoints of `(dx, dy, gripper)`.
pub const THETA_DIM: usize = 9;
pub const N_SKILLS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Half side of the square world box.
    pub world_half: f64,
    pub mount_min: [f64; 2],
    pub mount_max: [f64; 2],
    /// End-effector home relative to the mount.
    pub home_offset: [f64; 2],
    pub home_jitter: f64,
    pub grasp_radius: f64,
    pub slip_radius: f64,
    /// Handle rotation that counts as a slip when the grasp is poor,
    /// as a fraction of `rot_travel`.
    pub slip_tolerance: f64,
    pub rot_travel: f64,
    pub pull_travel: f64,
    pub angle_max: f64,
    pub door_max: f64,
    pub goal_threshold: f64,
    /// Reference observation noise (meters).
    pub sigma_ref: f64,
    pub reach_standoff: f64,
    /// Travel limit of one skill execution. A skill that runs out of travel
    /// aborts: its remaining waypoints and gripper commands are dropped.
    pub max_skill_travel: f64,
    /// Travel limit of an evaluation episode.
    pub max_episode_travel: f64,
    /// Recovery waypoint displacements are `theta * theta_scale` meters.
    pub theta_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            world_half: 0.5,
            mount_min: [-0.2, 0.0],
            mount_max: [0.2, 0.2],
            home_offset: [0.0, -0.15],
            home_jitter: 0.05,
            grasp_radius: 0.03,
            slip_radius: 0.024,
            slip_tolerance: 0.01,
            rot_travel: 0.05,
            pull_travel: 0.15,
            angle_max: 0.8,
            door_max: 1.0,
            goal_threshold: 0.5,
            sigma_ref: 0.02,
            reach_standoff: 0.05,
            max_skill_travel: 0.22,
            max_episode_travel: 0.6,
            theta_scale: 0.3,
        }
    }
}

impl EnvConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: EnvConfig =
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("world_half", self.world_half),
            ("grasp_radius", self.grasp_radius),
            ("slip_radius", self.slip_radius),
            ("rot_travel", self.rot_travel),
            ("pull_travel", self.pull_travel),
            ("angle_max", self.angle_max),
            ("door_max", self.door_max),
            ("max_skill_travel", self.max_skill_travel),
            ("max_episode_travel", self.max_episode_travel),
            ("theta_scale", self.theta_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.slip_radius > self.grasp_radius {
            return Err(Error::InvalidArgument("slip_radius exceeds grasp_radius".into()));
        }
        if !(self.goal_threshold > 0.0 && self.goal_threshold <= self.door_max) {
            return Err(Error::InvalidArgument("goal_threshold outside (0, door_max]".into()));
        }
        if !(self.sigma_ref >= 0.0) {
            return Err(Error::InvalidArgument("sigma_ref must be non-negative".into()));
        }
        Ok(())
    }

    pub fn total_travel(&self) -> f64 {
        self.rot_travel + self.pull_travel
    }

    /// Per-feature divisors used for nearest-neighbour distances.
    pub fn feature_scale(&self) -> [f64; FEATURE_DIM] {
        [
            self.world_half,
            self.world_half,
            1.0,
            self.grasp_radius,
            self.grasp_radius,
            self.angle_max,
            self.door_max,
        ]
    }

    /// Bounding box of the feature space, `(lo, hi)`.
    pub fn feature_bounds(&self) -> ([f64; FEATURE_DIM], [f64; FEATURE_DIM]) {
        let h = self.world_half;
        (
            [-h, -h, 0.0, -h, -h, 0.0, 0.0],
            [h, h, 1.0, h, h, self.angle_max, self.door_max],
        )
    }

    pub fn theta_bounds(&self) -> ([f64; THETA_DIM], [f64; THETA_DIM]) {
        let lo = [-1.0, -1.0, 0.0, -1.0, -1.0, 0.0, -1.0, -1.0, 0.0];
        let hi = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub ee_pos: [f64; 2],
    pub gripper_closed: bool,
    /// End-effector offset from the grip point, present while grasped.
    pub grasp_offset: Option<[f64; 2]>,
    pub handle_angle: f64,
    pub door_open: f64,
    pub handle_pos_true: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObservationMode {
    OpenLoopFrozen,
    HalvingEstimator,
    IdealizedEstimator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    pub sigma: f64,
    pub mode: ObservationMode,
}

impl ObservationModel {
    pub fn new(sigma: f64, mode: ObservationMode) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
        }
        Ok(ObservationModel { sigma, mode })
    }

    pub fn exact() -> Self {
        ObservationModel {
            sigma: 0.0,
            mode: ObservationMode::IdealizedEstimator,
        }
    }
}

/// Per-episode handle estimate.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub model: ObservationModel,
    pub skills_done: usize,
    pub obs: [f64; 2],
}

impl Estimator {
    pub fn start<R: Rng + ?Sized>(model: ObservationModel, truth: [f64; 2], rng: &mut R) -> Self {
        let obs = noisy(truth, model.sigma, rng);
        Estimator {
            model,
            skills_done: 0,
            obs,
        }
    }

    pub fn sigma(&self) -> f64 {
        match self.model.mode {
            ObservationMode::OpenLoopFrozen => self.model.sigma,
            ObservationMode::HalvingEstimator => self.model.sigma * 0.5f64.powi(self.skills_done as i32),
            ObservationMode::IdealizedEstimator if self.skills_done == 0 => self.model.sigma,
            ObservationMode::IdealizedEstimator => 0.0,
        }
    }

    /// Call after every skill execution.
    pub fn advance<R: Rng + ?Sized>(&mut self, truth: [f64; 2], rng: &mut R) {
        self.skills_done += 1;
        match self.model.mode {
            ObservationMode::OpenLoopFrozen => {}
            ObservationMode::HalvingEstimator => self.obs = noisy(truth, self.sigma(), rng),
            ObservationMode::IdealizedEstimator => self.obs = truth,
        }
    }
}

fn noisy<R: Rng + ?Sized>(truth: [f64; 2], sigma: f64, rng: &mut R) -> [f64; 2] {
    if sigma == 0.0 {
        return truth;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    [truth[0] + n.sample(rng), truth[1] + n.sample(rng)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NominalSkill {
    Reach,
    Rotate,
    Pull,
}

impl NominalSkill {
    pub const CHAIN: [NominalSkill; N_SKILLS] = [NominalSkill::Reach, NominalSkill::Rotate, NominalSkill::Pull];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NominalSkill::Reach => "reach",
            NominalSkill::Rotate => "rotate",
            NominalSkill::Pull => "pull",
        }
    }

    /// Waypoints relative to the observed handle mount.
    pub fn plan(self, h_obs: [f64; 2], cfg: &EnvConfig) -> Vec<Waypoint> {
        let at = |dy: f64, close: bool| Waypoint {
            target: [h_obs[0], h_obs[1] - dy],
            close,
        };
        match self {
            NominalSkill::Reach => vec![at(cfg.reach_standoff, false), at(0.0, true)],
            NominalSkill::Rotate => vec![at(cfg.rot_travel, true)],
            NominalSkill::Pull => vec![at(cfg.total_travel(), true)],
        }
    }
}

/// Move to `target`, then set the gripper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub target: [f64; 2],
    pub close: bool,
}

/// Decodes recovery parameters into waypoints relative to the observed mount.
pub fn theta_plan(theta: &[f64], h_obs: [f64; 2], cfg: &EnvConfig) -> Result<Vec<Waypoint>> {
    if theta.len() != THETA_DIM {
        return Err(Error::InvalidTheta(format!("expected {THETA_DIM} values, got {}", theta.len())));
    }
    let (lo, hi) = cfg.theta_bounds();
    for (k, &t) in theta.iter().enumerate() {
        if !t.is_finite() || t < lo[k] - 1e-9 || t > hi[k] + 1e-9 {
            return Err(Error::InvalidTheta(format!("theta[{k}] = {t} outside [{}, {}]", lo[k], hi[k])));
        }
    }
    Ok(theta
        .chunks(3)
        .map(|w| Waypoint {
            target: [
                h_obs[0] + w[0] * cfg.theta_scale,
                h_obs[1] + w[1] * cfg.theta_scale,
            ],
            close: w[2] >= 0.5,
        })
        .collect())
}

/// Waypoints that retrace a plan back to `start`.
pub fn reverse_plan(plan: &[Waypoint], start: &WorldState) -> Vec<Waypoint> {
    let mut out: Vec<Waypoint> = plan.iter().rev().skip(1).copied().collect();
    out.push(Waypoint {
        target: start.ee_pos,
        close: start.gripper_closed,
    });
    out
}

#[derive(Debug, Clone)]
pub struct LatchEnv {
    pub config: EnvConfig,
}

impl LatchEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(LatchEnv { config })
    }

    /// Places the handle and the end-effector and draws the first observation.
    pub fn reset(&self, seed: u64, obs_model: ObservationModel) -> (WorldState, Estimator) {
        let mut rng = rng_for(seed, 0x7e5e7);
        let state = self.sample_start(&mut rng);
        let est = Estimator::start(obs_model, state.handle_pos_true, &mut rng);
        (state, est)
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> WorldState {
        let c = &self.config;
        let mount = [
            rng.random_range(c.mount_min[0]..=c.mount_max[0]),
            rng.random_range(c.mount_min[1]..=c.mount_max[1]),
        ];
        let j = c.home_jitter;
        let ee = [
            mount[0] + c.home_offset[0] + rng.random_range(-j..=j),
            mount[1] + c.home_offset[1] + rng.random_range(-j..=j),
        ];
        WorldState {
            ee_pos: self.clamp_box(ee),
            gripper_closed: false,
            grasp_offset: None,
            handle_angle: 0.0,
            door_open: 0.0,
            handle_pos_true: mount,
        }
    }

    fn clamp_box(&self, p: [f64; 2]) -> [f64; 2] {
        let h = self.config.world_half;
        [p[0].clamp(-h, h), p[1].clamp(-h, h)]
    }

    /// Mechanism travel of a state.
    pub fn travel(&self, s: &WorldState) -> f64 {
        let c = &self.config;
        c.rot_travel * s.handle_angle / c.angle_max + c.pull_travel * s.door_open / c.door_max
    }

    fn set_travel(&self, s: &mut WorldState, u: f64) {
        let c = &self.config;
        let u = u.clamp(0.0, c.total_travel());
        s.handle_angle = c.angle_max * (u.min(c.rot_travel) / c.rot_travel);
        s.door_open = c.door_max * ((u - c.rot_travel).max(0.0) / c.pull_travel);
    }

    pub fn grip_point(&self, s: &WorldState) -> [f64; 2] {
        let u = self.travel(s);
        [s.handle_pos_true[0], s.handle_pos_true[1] - u]
    }

    pub fn goal_predicate(&self, s: &WorldState) -> bool {
        s.door_open >= self.config.goal_threshold
    }

    pub fn features(&self, s: &WorldState) -> Vec<f64> {
        self.features_with_mount(s, s.handle_pos_true)
    }

    /// Features computed against an estimated mount (the most likely state).
    pub fn features_with_mount(&self, s: &WorldState, mount: [f64; 2]) -> Vec<f64> {
        let u = self.travel(s);
        let grip = [mount[0], mount[1] - u];
        vec![
            s.ee_pos[0],
            s.ee_pos[1],
            if s.gripper_closed { 1.0 } else { 0.0 },
            s.ee_pos[0] - grip[0],
            s.ee_pos[1] - grip[1],
            s.handle_angle,
            s.door_open,
        ]
    }

    /// Inverse of [`LatchEnv::features`]. The gripper is closed iff its
    /// feature is at least 0.5, and a closed gripper within `grasp_radius`
    /// of the grip point holds the handle.
    pub fn from_features(&self, f: &[f64]) -> Result<WorldState> {
        if f.len() != FEATURE_DIM {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_DIM,
                got: f.len(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let c = &self.config;
        let mut s = WorldState {
            ee_pos: self.clamp_box([f[0], f[1]]),
            gripper_closed: f[2] >= 0.5,
            grasp_offset: None,
            handle_angle: 0.0,
            door_open: 0.0,
            handle_pos_true: [0.0, 0.0],
        };
        let angle = f[5].clamp(0.0, c.angle_max);
        let door = f[6].clamp(0.0, c.door_max);
        let u = c.rot_travel * angle / c.angle_max + c.pull_travel * door / c.door_max;
        self.set_travel(&mut s, u);
        let off = [f[3], f[4]];
        let grip = [s.ee_pos[0] - off[0], s.ee_pos[1] - off[1]];
        s.handle_pos_true = [grip[0], grip[1] + self.travel(&s)];
        if s.gripper_closed && norm(off) <= c.grasp_radius {
            s.grasp_offset = Some(off);
        }
        Ok(s)
    }

    /// Executes waypoints with a travel limit; returns the new state and the
    /// end-effector path length.
    pub fn execute_plan(&self, state: &WorldState, plan: &[Waypoint], travel_limit: f64) -> (WorldState, f64) {
        let mut s = state.clone();
        let mut budget = travel_limit.max(0.0);
        let mut cost = 0.0;
        for wp in plan {
            let (moved, complete) = self.move_to(&mut s, self.clamp_box(wp.target), &mut budget);
            cost += moved;
            if !complete {
                break;
            }
            self.set_gripper(&mut s, wp.close);
        }
        (s, cost)
    }

    pub fn execute_skill(&self, state: &WorldState, skill: NominalSkill, h_obs: [f64; 2]) -> (WorldState, f64) {
        self.execute_plan(state, &skill.plan(h_obs, &self.config), self.config.max_skill_travel)
    }

    pub fn execute_theta(&self, state: &WorldState, theta: &[f64], h_obs: [f64; 2]) -> Result<(WorldState, f64)> {
        let plan = theta_plan(theta, h_obs, &self.config)?;
        Ok(self.execute_plan(state, &plan, self.config.max_skill_travel))
    }

    fn set_gripper(&self, s: &mut WorldState, close: bool) {
        if !close {
            s.gripper_closed = false;
            s.grasp_offset = None;
        } else if !s.gripper_closed {
            s.gripper_closed = true;
            let grip = self.grip_point(s);
            let off = [s.ee_pos[0] - grip[0], s.ee_pos[1] - grip[1]];
            if norm(off) <= self.config.grasp_radius {
                s.grasp_offset = Some(off);
            }
        }
    }

    /// Returns the distance moved and whether the motion ran to completion
    /// (as opposed to running out of travel).
    fn move_to(&self, s: &mut WorldState, target: [f64; 2], budget: &mut f64) -> (f64, bool) {
        match s.grasp_offset {
            Some(off) => self.move_grasped(s, off, target, budget),
            None => self.move_free(s, target, budget),
        }
    }

    fn move_grasped(&self, s: &mut WorldState, off: [f64; 2], target: [f64; 2], budget: &mut f64) -> (f64, bool) {
        let c = &self.config;
        let u0 = self.travel(s);
        // the door ratchets, so travel cannot go back below the door's share
        let lo = if s.door_open > 0.0 { u0.min(c.total_travel()) } else { 0.0 };
        let wanted = (u0 + (s.ee_pos[1] - target[1])).clamp(lo, c.total_travel());
        let step = (wanted - u0).clamp(-*budget, *budget);
        let complete = step == wanted - u0;
        let mut u1 = u0 + step;
        let rot = |u: f64| u.min(c.rot_travel);
        let slip_at = c.slip_tolerance * c.rot_travel;
        let slips = norm(off) > c.slip_radius && (rot(u1) - rot(u0)).abs() > slip_at;
        if slips {
            u1 = u0 + slip_at * step.signum();
        }
        self.set_travel(s, u1);
        let grip = self.grip_point(s);
        s.ee_pos = [grip[0] + off[0], grip[1] + off[1]];
        let moved = (u1 - u0).abs();
        *budget = (*budget - moved).max(0.0);
        if slips {
            s.grasp_offset = None;
            let (rest, complete) = self.move_free(s, target, budget);
            return (moved + rest, complete);
        }
        (moved, complete)
    }

    fn move_free(&self, s: &mut WorldState, target: [f64; 2], budget: &mut f64) -> (f64, bool) {
        let a = s.ee_pos;
        let d = [target[0] - a[0], target[1] - a[1]];
        let len = norm(d);
        if len == 0.0 {
            return (0.0, true);
        }
        let mut t_end = (*budget / len).min(1.0);
        let mut complete = t_end == 1.0;
        if s.gripper_closed {
            // closed fingers cannot pass through the handle
            let c = self.grip_point(s);
            if let Some(t) = disc_entry(a, d, c, self.config.grasp_radius) {
                if t <= t_end {
                    t_end = t;
                    complete = true;
                }
            }
        }
        s.ee_pos = [a[0] + d[0] * t_end, a[1] + d[1] * t_end];
        let moved = len * t_end;
        *budget = (*budget - moved).max(0.0);
        (moved, complete)
    }

    /// Runs the nominal chain. `stop` is checked on the true state after
    /// every skill; returning `true` ends the episode early.
    pub fn run_chain(
        &self,
        obs_model: ObservationModel,
        stop: Option<&(dyn Fn(&WorldState) -> bool + Sync)>,
        seed: u64,
    ) -> ChainRecord {
        let (mut state, mut est) = self.reset(seed, obs_model);
        let mut rng = rng_for(seed, 0x0b5);
        let mut rec = ChainRecord {
            states: vec![state.clone()],
            observations: vec![est.obs],
            costs: Vec::new(),
            success: false,
            failure_state: None,
        };
        for skill in NominalSkill::CHAIN {
            let (next, cost) = self.execute_skill(&state, skill, est.obs);
            state = next;
            est.advance(state.handle_pos_true, &mut rng);
            rec.states.push(state.clone());
            rec.observations.push(est.obs);
            rec.costs.push(cost);
            if let Some(stop) = stop {
                if !self.goal_predicate(&state) && stop(&state) {
                    rec.failure_state = Some(state);
                    return rec;
                }
            }
        }
        rec.success = self.goal_predicate(&state);
        rec
    }
}

/// Trajectory of one chain execution.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    /// Start state followed by the state after every executed skill.
    pub states: Vec<WorldState>,
    /// Observation used before each skill, plus the final one.
    pub observations: Vec<[f64; 2]>,
    pub costs: Vec<f64>,
    pub success: bool,
    pub failure_state: Option<WorldState>,
}

impl ChainRecord {
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn write_csv(&self, env: &LatchEnv, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "step", "ee_x", "ee_y", "gripper", "off_x", "off_y", "angle", "door", "obs_x", "obs_y", "cost",
        ])?;
        for (k, s) in self.states.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(env.features(s).iter().map(|v| v.to_string()));
            let o = self.observations.get(k).copied().unwrap_or([f64::NAN; 2]);
            row.push(o[0].to_string());
            row.push(o[1].to_string());
            let cost = if k == 0 { 0.0 } else { self.costs[k - 1] };
            row.push(cost.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// Smallest `t` in `[0, 1]` where `a + t d` enters the disc `(c, r)`, if the
/// segment starts outside it.
fn disc_entry(a: [f64; 2], d: [f64; 2], c: [f64; 2], r: f64) -> Option<f64> {
    let f = [a[0] - c[0], a[1] - c[1]];
    let cc = f[0] * f[0] + f[1] * f[1] - r * r;
    if cc <= 0.0 {
        return None;
    }
    let aa = d[0] * d[0] + d[1] * d[1];
    let bb = 2.0 * (f[0] * d[0] + f[1] * d[1]);
    let disc = bb * bb - 4.0 * aa * cc;
    if disc < 0.0 || aa == 0.0 {
        return None;
    }
    let t = (-bb - disc.sqrt()) / (2.0 * aa);
    (0.0..=1.0).contains(&t).then_some(t)
}

/// Writes any serializable config as pretty JSON.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn env() -> LatchEnv {
        LatchEnv::new(EnvConfig::default()).unwrap()
    }

    fn grasped_at(env: &LatchEnv, off: [f64; 2]) -> WorldState {
        let (s, _) = env.reset(1, ObservationModel::exact());
        let mut f = env.features(&s);
        f[0] = s.handle_pos_true[0] + off[0];
        f[1] = s.handle_pos_true[1] + off[1];
        f[2] = 1.0;
        f[3] = off[0];
        f[4] = off[1];
        env.from_features(&f).unwrap()
    }

    #[test]
    fn zero_noise_chain_opens_the_door() {
        let env = env();
        for seed in 0..200 {
            let rec = env.run_chain(ObservationModel::exact(), None, seed);
            assert!(rec.success, "seed {seed}");
            let last = rec.states.last().unwrap();
            assert_abs_diff_eq!(last.door_open, env.config.door_max, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_noise_cost_is_the_nominal_path() {
        let env = env();
        let rec = env.run_chain(ObservationModel::exact(), None, 3);
        let s0 = &rec.states[0];
        let h = s0.handle_pos_true;
        let c = &env.config;
        let stand = [h[0], h[1] - c.reach_standoff];
        let reach = (s0.ee_pos[0] - stand[0]).hypot(s0.ee_pos[1] - stand[1]) + c.reach_standoff;
        assert_abs_diff_eq!(rec.costs[0], reach, epsilon = 1e-12);
        assert_abs_diff_eq!(rec.costs[1], c.rot_travel, epsilon = 1e-12);
        assert_abs_diff_eq!(rec.costs[2], c.pull_travel, epsilon = 1e-12);
    }

    #[test]
    fn reset_observation_noise() {
        let env = env();
        let model = ObservationModel::new(0.02, ObservationMode::OpenLoopFrozen).unwrap();
        let errs: Vec<f64> = (0..10_000)
            .map(|seed| {
                let (s, e) = env.reset(seed, model);
                e.obs[0] - s.handle_pos_true[0]
            })
            .collect();
        let sd = crate::stats::sample_std(&errs);
        assert!((sd - 0.02).abs() < 0.001, "{sd}");
        let (s, e) = env.reset(9, ObservationModel::exact());
        assert_eq!(e.obs, s.handle_pos_true);
        assert_eq!(env.reset(9, model).0, env.reset(9, model).0);
        assert_eq!(env.reset(9, model).1.obs, env.reset(9, model).1.obs);
    }

    #[test]
    fn missed_grasp_leaves_gripper_closed_on_nothing() {
        let env = env();
        let (s, _) = env.reset(4, ObservationModel::exact());
        let h = s.handle_pos_true;
        let obs = [h[0] + 0.035, h[1]];
        let (s1, _) = env.execute_skill(&s, NominalSkill::Reach, obs);
        assert!(s1.gripper_closed);
        assert!(s1.grasp_offset.is_none());
    }

    #[test]
    fn poor_grasp_slips_on_rotate() {
        let env = env();
        let (s, _) = env.reset(5, ObservationModel::exact());
        let h = s.handle_pos_true;
        let obs = [h[0] + 0.027, h[1]];
        let (s1, _) = env.execute_skill(&s, NominalSkill::Reach, obs);
        assert!(s1.grasp_offset.is_some());
        let (s2, _) = env.execute_skill(&s1, NominalSkill::Rotate, obs);
        assert!(s2.grasp_offset.is_none());
        assert!(s2.handle_angle < 0.05 * env.config.angle_max);
        // a good grasp rotates fully
        let (g1, _) = env.execute_skill(&s, NominalSkill::Reach, [h[0] + 0.02, h[1]]);
        let (g2, _) = env.execute_skill(&g1, NominalSkill::Rotate, [h[0] + 0.02, h[1]]);
        assert_abs_diff_eq!(g2.handle_angle, env.config.angle_max, epsilon = 1e-12);
    }

    #[test]
    fn closed_gripper_is_blocked_by_the_handle() {
        let env = env();
        let (mut s, _) = env.reset(6, ObservationModel::exact());
        s.gripper_closed = true;
        let h = s.handle_pos_true;
        let plan = [Waypoint {
            target: h,
            close: true,
        }];
        let (s1, _) = env.execute_plan(&s, &plan, 1.0);
        let d = (s1.ee_pos[0] - h[0]).hypot(s1.ee_pos[1] - h[1]);
        assert_abs_diff_eq!(d, env.config.grasp_radius, epsilon = 1e-9);
        assert!(s1.grasp_offset.is_none());
    }

    #[test]
    fn door_ratchets_and_handle_only_moves_when_grasped() {
        let env = env();
        let s = grasped_at(&env, [0.0, 0.0]);
        let h = s.handle_pos_true;
        let (s1, _) = env.execute_plan(&s, &[Waypoint { target: [h[0], h[1] - 0.12], close: true }], 1.0);
        assert!(s1.door_open > 0.0);
        let (s2, _) = env.execute_plan(&s1, &[Waypoint { target: [h[0], h[1] + 0.2], close: true }], 1.0);
        assert_eq!(s2.door_open, s1.door_open);
        let (s3, _) = env.execute_plan(&s2, &[Waypoint { target: [h[0] + 0.2, h[1] - 0.3], close: false }], 1.0);
        assert_eq!(s3.handle_angle, s2.handle_angle);
        let (s4, _) = env.execute_plan(&s3, &[Waypoint { target: [h[0] - 0.2, h[1] - 0.3], close: false }], 1.0);
        assert_eq!((s4.handle_angle, s4.door_open), (s3.handle_angle, s3.door_open));
    }

    #[test]
    fn travel_limit_aborts_the_skill() {
        let env = env();
        let (s, _) = env.reset(7, ObservationModel::exact());
        let target = [s.ee_pos[0] + 0.3, s.ee_pos[1]];
        let plan = [
            Waypoint { target, close: true },
            Waypoint { target: s.ee_pos, close: false },
        ];
        let (s1, cost) = env.execute_plan(&s, &plan, 0.1);
        assert_abs_diff_eq!(cost, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(s1.ee_pos[0], s.ee_pos[0] + 0.1, epsilon = 1e-12);
        assert!(!s1.gripper_closed);
    }

    #[test]
    fn cost_is_segment_length_sum() {
        let env = env();
        let (s, _) = env.reset(8, ObservationModel::exact());
        let p = s.ee_pos;
        let wps = [
            Waypoint { target: [p[0] + 0.03, p[1]], close: false },
            Waypoint { target: [p[0] + 0.03, p[1] - 0.04], close: false },
            Waypoint { target: [p[0], p[1]], close: false },
        ];
        let (_, cost) = env.execute_plan(&s, &wps, 10.0);
        assert_abs_diff_eq!(cost, 0.03 + 0.04 + 0.05, epsilon = 1e-12);
    }

    #[test]
    fn features_round_trip() {
        let env = env();
        for seed in 0..50 {
            let rec = env.run_chain(ObservationModel::new(0.01, ObservationMode::HalvingEstimator).unwrap(), None, seed);
            for s in &rec.states {
                let back = env.from_features(&env.features(s)).unwrap();
                let (a, b) = (env.features(s), env.features(&back));
                for k in 0..FEATURE_DIM {
                    assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-12);
                }
                for k in 0..2 {
                    assert_abs_diff_eq!(back.handle_pos_true[k], s.handle_pos_true[k], epsilon = 1e-12);
                }
                assert_eq!(back.grasp_offset.is_some(), s.grasp_offset.is_some());
            }
        }
    }

    #[test]
    fn goal_predicate_is_closed() {
        let env = env();
        let (mut s, _) = env.reset(1, ObservationModel::exact());
        assert!(!env.goal_predicate(&s));
        s.door_open = env.config.goal_threshold;
        assert!(env.goal_predicate(&s));
        s.door_open = env.config.door_max;
        assert!(env.goal_predicate(&s));
    }

    #[test]
    fn estimator_modes() {
        let env = env();
        let truth = [0.1, 0.1];
        let mut rng = rng_for(0, 0);
        let m = ObservationModel::new(0.02, ObservationMode::HalvingEstimator).unwrap();
        let mut e = Estimator::start(m, truth, &mut rng);
        e.advance(truth, &mut rng);
        e.advance(truth, &mut rng);
        assert_abs_diff_eq!(e.sigma(), 0.005);
        let m = ObservationModel::new(0.02, ObservationMode::IdealizedEstimator).unwrap();
        let mut e = Estimator::start(m, truth, &mut rng);
        e.advance(truth, &mut rng);
        assert_eq!(e.obs, truth);
        let m = ObservationModel::new(0.02, ObservationMode::OpenLoopFrozen).unwrap();
        let mut e = Estimator::start(m, truth, &mut rng);
        let o = e.obs;
        e.advance(truth, &mut rng);
        assert_eq!(e.obs, o);
        let _ = env;
    }

    #[test]
    fn theta_validation() {
        let env = env();
        let (s, _) = env.reset(1, ObservationModel::exact());
        assert!(matches!(env.execute_theta(&s, &[0.0; 4], [0.0; 2]), Err(Error::InvalidTheta(_))));
        let mut th = [0.0; THETA_DIM];
        th[0] = 1.5;
        assert!(matches!(env.execute_theta(&s, &th, [0.0; 2]), Err(Error::InvalidTheta(_))));
    }

    #[test]
    fn regrasp_theta_recovers_a_missed_grasp() {
        let env = env();
        let (s, _) = env.reset(2, ObservationModel::exact());
        let h = s.handle_pos_true;
        let (miss, _) = env.execute_skill(&s, NominalSkill::Reach, [h[0] - 0.04, h[1] + 0.01]);
        assert!(miss.grasp_offset.is_none());
        let sc = env.config.theta_scale;
        let th = [0.0, -0.1 / sc, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let (s1, _) = env.execute_theta(&miss, &th, h).unwrap();
        assert!(s1.grasp_offset.is_some());
    }
}
