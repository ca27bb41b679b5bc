//! Experiment pipelines: precondition chaining, failure discovery, recovery
//! training, policy evaluation and the synthetic allocation testbed.
//!
//! Each pipeline writes to `<out>/<pipeline>-seed<N>/` and drops a snapshot
//! of the effective configuration there. Later pipelines reuse the
//! artifacts of earlier ones when they exist under the same output root and
//! recompute them otherwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::{
    run_allocation, write_counts_csv, write_matrix_csv, write_rows_csv, AllocationResult, AllocatorConfig,
    RecoveryTrainer, Strategy,
};
use crate::classifiers::{DEFAULT_NEGATIVE_COMPONENTS, DEFAULT_PRIOR_POSITIVE};
use crate::discovery::{
    classify_failure, cluster_failures, discover_early_termination, discover_pessimistic, read_records_csv,
    write_records_csv, DiscoveryStrategy, FailureModeSet, FailureRecord, PESSIMISTIC_NOISE_SCALE,
};
use crate::env::{
    reverse_plan, theta_plan, write_json, EnvConfig, LatchEnv, NominalSkill, ObservationMode, ObservationModel,
    Waypoint, WorldState,
};
use crate::error::{Error, Result};
use crate::par::{map_indexed, map_slice, mix_seed, rng_for, Exec};
use crate::persistence::{load_artifact, save_artifact};
use crate::precondition::{
    chain_preconditions, collect_success_trajectories, ChainingOptions, NominalChain, PreconditionSet,
    DEFAULT_NEIGHBORHOOD_SCALE, DEFAULT_SAMPLES_PER_SKILL,
};
use crate::recovery::{
    clamp_theta, default_scale, estimate_success_rate, knn_predict, train_recovery_datapoint, RecoveryConfig,
    RecoveryLibrary,
};
use crate::skill_graph::{
    extract_policy, target_index, value_iteration, SymbolId, SymbolicGraph, C_FAIL_COST_MULTIPLE, DEFAULT_GAMMA,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::synthetic::{rounds_to_reach, run_synthetic, CurveSetSpec, DEFAULT_NOISE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    ChainPreconds,
    Discover,
    TrainRecoveries,
    Evaluate,
    SyntheticAllocation,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::ChainPreconds => "chain-preconds",
            Pipeline::Discover => "discover",
            Pipeline::TrainRecoveries => "train",
            Pipeline::Evaluate => "evaluate",
            Pipeline::SyntheticAllocation => "synth-alloc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainingSettings {
    pub n_trajectories: usize,
    /// Initial noise of the halving estimator during collection.
    pub collection_sigma: f64,
    pub samples_per_skill: usize,
    pub neighborhood_scale: f64,
    pub negative_components: usize,
    pub prior_positive: f64,
    /// Episodes averaged for the nominal skill costs.
    pub cost_episodes: usize,
}

impl Default for ChainingSettings {
    fn default() -> Self {
        ChainingSettings {
            n_trajectories: 60,
            collection_sigma: 0.01,
            samples_per_skill: DEFAULT_SAMPLES_PER_SKILL,
            neighborhood_scale: DEFAULT_NEIGHBORHOOD_SCALE,
            negative_components: DEFAULT_NEGATIVE_COMPONENTS,
            prior_positive: DEFAULT_PRIOR_POSITIVE,
            cost_episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoverySettings {
    pub strategy: DiscoveryStrategy,
    pub n_episodes: usize,
    /// Reference noise; pessimistic discovery scales it up.
    pub sigma: f64,
    /// Defaults to the strategy's mode count.
    pub n_modes: Option<usize>,
}

impl Default for DiscoverySettings {
    fn default() -> Self {
        DiscoverySettings {
            strategy: DiscoveryStrategy::Pessimistic,
            n_episodes: 1000,
            sigma: 0.02,
            n_modes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPolicy {
    OpenLoop,
    NoRecovery,
    Retry,
    RecoverToPrev,
    RecoverToStart,
    LearnedRecovery,
}

impl EvalPolicy {
    pub const ALL: [EvalPolicy; 6] = [
        EvalPolicy::OpenLoop,
        EvalPolicy::NoRecovery,
        EvalPolicy::Retry,
        EvalPolicy::RecoverToPrev,
        EvalPolicy::RecoverToStart,
        EvalPolicy::LearnedRecovery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalPolicy::OpenLoop => "open-loop",
            EvalPolicy::NoRecovery => "no-recovery",
            EvalPolicy::Retry => "retry",
            EvalPolicy::RecoverToPrev => "recover-to-prev",
            EvalPolicy::RecoverToStart => "recover-to-start",
            EvalPolicy::LearnedRecovery => "learned-recovery",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSettings {
    pub n_episodes: usize,
    /// Initial noise of the halving estimator.
    pub sigma: f64,
    /// Skill and recovery executions per episode.
    pub max_executions: usize,
    pub policies: Vec<EvalPolicy>,
    /// Also report every policy without the episode travel cap.
    pub report_uncapped: bool,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        EvaluationSettings {
            n_episodes: 200,
            sigma: 0.02,
            max_executions: 10,
            policies: EvalPolicy::ALL.to_vec(),
            report_uncapped: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSettings {
    pub curves: CurveSetSpec,
    pub noise: f64,
    pub budget: usize,
    pub nominal_costs: Vec<f64>,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        SyntheticSettings {
            curves: CurveSetSpec::default(),
            noise: DEFAULT_NOISE,
            budget: 100,
            nominal_costs: vec![1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Optional env config file; relative paths resolve against the
    /// experiment config's directory. Overrides `env` when set.
    pub env_config: Option<PathBuf>,
    pub env: EnvConfig,
    pub strategy: Strategy,
    pub chaining: ChainingSettings,
    pub discovery: DiscoverySettings,
    pub recovery: RecoveryConfig,
    pub allocator: AllocatorConfig,
    pub evaluation: EvaluationSettings,
    pub synthetic: SyntheticSettings,
    pub exec: Exec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: (0..5).collect(),
            env_config: None,
            env: EnvConfig::default(),
            strategy: Strategy::ValueUcl,
            chaining: ChainingSettings::default(),
            discovery: DiscoverySettings::default(),
            recovery: RecoveryConfig::default(),
            allocator: AllocatorConfig::default(),
            evaluation: EvaluationSettings::default(),
            synthetic: SyntheticSettings::default(),
            exec: Exec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config and resolves `env_config`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if let Some(p) = cfg.env_config.take() {
            let p = if p.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(p)
            } else {
                p
            };
            cfg.env = EnvConfig::load(&p)?;
            cfg.env_config = Some(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.recovery.reps.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::EmptyInput("seeds"));
        }
        if self.evaluation.max_executions == 0 {
            return Err(Error::InvalidArgument("max_executions must be positive".into()));
        }
        let n_modes = self.n_modes();
        self.allocator.validate(self.strategy, n_modes * (crate::env::N_SKILLS + 1))?;
        let synth_skills = self.synthetic.curves.n_modes * self.synthetic.curves.n_targets;
        let synth = AllocatorConfig {
            budget: self.synthetic.budget,
            ..self.allocator.clone()
        };
        synth.validate(Strategy::ValueUcl, synth_skills)
    }

    pub fn n_modes(&self) -> usize {
        self.discovery.n_modes.unwrap_or(self.discovery.strategy.default_modes())
    }

    pub fn env(&self) -> Result<LatchEnv> {
        LatchEnv::new(self.env.clone())
    }

    fn chaining_options(&self) -> ChainingOptions {
        ChainingOptions {
            samples_per_skill: self.chaining.samples_per_skill,
            scale: self.chaining.neighborhood_scale,
            negative_components: self.chaining.negative_components,
            prior_positive: self.chaining.prior_positive,
            exec: self.exec,
        }
    }

    fn recovery_config(&self) -> RecoveryConfig {
        RecoveryConfig {
            exec: self.exec,
            ..self.recovery.clone()
        }
    }
}

/// `<out>/<name>-seed<N>`, created, with `config.json` inside.
pub fn prepare_dir(out: &Path, name: &str, seed: u64, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = out.join(format!("{name}-seed{seed}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(cfg, dir.join("config.json"))?;
    Ok(dir)
}

fn train_dir_name(strategy: Strategy) -> String {
    format!("train-{}", strategy.name())
}

// ---------------------------------------------------------------- chaining

/// Mean path length of every nominal skill over successful episodes.
pub fn nominal_costs(env: &LatchEnv, obs_model: ObservationModel, n: usize, seed: u64, exec: Exec) -> Result<Vec<f64>> {
    let runs = map_indexed(n, exec, |e| env.run_chain(obs_model, None, mix_seed(seed, e as u64)));
    let ok: Vec<_> = runs.into_iter().filter(|r| r.success).collect();
    if ok.is_empty() {
        return Err(Error::EmptyInput("successful episodes for nominal costs"));
    }
    let k = ok[0].costs.len();
    Ok((0..k)
        .map(|s| ok.iter().map(|r| r.costs[s]).sum::<f64>() / ok.len() as f64)
        .collect())
}

#[derive(Debug, Clone)]
pub struct ChainOutcome {
    pub preconds: PreconditionSet,
    pub nominal_costs: Vec<f64>,
    pub dir: PathBuf,
}

pub fn cmd_chain_preconds(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<ChainOutcome> {
    let dir = prepare_dir(out, Pipeline::ChainPreconds.name(), seed, cfg)?;
    let env = cfg.env()?;
    let chain = NominalChain::latch();
    let obs = ObservationModel::new(cfg.chaining.collection_sigma, ObservationMode::HalvingEstimator)?;
    let trajs = collect_success_trajectories(&chain, &env, obs, cfg.chaining.n_trajectories, seed, cfg.exec)?;
    let res = chain_preconditions(&chain, &env, &trajs, &cfg.chaining_options(), seed)?;
    let costs = nominal_costs(&env, obs, cfg.chaining.cost_episodes, mix_seed(seed, 0xc057), cfg.exec)?;
    save_artifact(&res.set, seed, dir.join("preconditions.rfj"))?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["skill", "name", "positives", "negatives", "self_positive_rate", "nominal_cost"])?;
    for (i, skill) in chain.skills.iter().enumerate() {
        let pos = res.labels.iter().filter(|l| l.skill == i && l.positive).count();
        let neg = res.labels.iter().filter(|l| l.skill == i && !l.positive).count();
        // fraction of the skill's own start states that its precondition accepts
        let own: Vec<bool> = trajs
            .iter()
            .map(|t| res.set.rho(i, &t[i]).map(|r| r >= 0.5))
            .collect::<Result<_>>()?;
        let rate = own.iter().filter(|b| **b).count() as f64 / own.len() as f64;
        w.write_record([
            i.to_string(),
            skill.name().to_string(),
            pos.to_string(),
            neg.to_string(),
            rate.to_string(),
            costs[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&dir, e))?;
    log::info!("seed {seed}: preconditions written to {}", dir.display());
    Ok(ChainOutcome {
        preconds: res.set,
        nominal_costs: costs,
        dir,
    })
}

fn read_nominal_costs(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let h = r.headers()?.clone();
    let col = h
        .iter()
        .position(|c| c == "nominal_cost")
        .ok_or_else(|| Error::Schema("summary.csv has no nominal_cost column".into()))?;
    r.records()
        .map(|rec| {
            rec?[col]
                .parse::<f64>()
                .map_err(|e| Error::Schema(format!("nominal_cost: {e}")))
        })
        .collect()
}

/// Loads the chaining output under `out` or computes it.
pub fn load_or_chain(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<(PreconditionSet, Vec<f64>)> {
    let dir = out.join(format!("{}-seed{seed}", Pipeline::ChainPreconds.name()));
    let p = dir.join("preconditions.rfj");
    let s = dir.join("summary.csv");
    if p.exists() && s.exists() {
        log::info!("seed {seed}: reusing {}", p.display());
        return Ok((load_artifact(&p)?.0, read_nominal_costs(&s)?));
    }
    let o = cmd_chain_preconds(cfg, out, seed)?;
    Ok((o.preconds, o.nominal_costs))
}

// --------------------------------------------------------------- discovery

#[derive(Debug, Clone)]
pub struct DiscoverOutcome {
    pub records: Vec<FailureRecord>,
    /// `None` when no failures were found.
    pub modes: Option<FailureModeSet>,
    pub dir: PathBuf,
}

pub fn cmd_discover(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<DiscoverOutcome> {
    let (preconds, _) = load_or_chain(cfg, out, seed)?;
    let dir = prepare_dir(out, Pipeline::Discover.name(), seed, cfg)?;
    let env = cfg.env()?;
    let chain = NominalChain::latch();
    let d = &cfg.discovery;
    let disc_seed = mix_seed(seed, 0xd15c);
    let records = match d.strategy {
        DiscoveryStrategy::Pessimistic => discover_pessimistic(
            &chain,
            &env,
            &preconds,
            d.n_episodes,
            d.sigma * PESSIMISTIC_NOISE_SCALE,
            disc_seed,
            cfg.exec,
        )?,
        DiscoveryStrategy::EarlyTermination => {
            let obs = ObservationModel::new(d.sigma, ObservationMode::HalvingEstimator)?;
            discover_early_termination(&chain, &env, &preconds, obs, d.n_episodes, disc_seed, cfg.exec)?
        }
    };
    let csv_path = dir.join("failures.csv");
    write_records_csv(&records, &csv_path)?;
    // every persisted record must fail all preconditions and the goal
    let reread = read_records_csv(&csv_path)?;
    for (n, r) in reread.iter().enumerate() {
        if !r.verify(&preconds)? {
            return Err(Error::InvariantViolation(format!("persisted failure record {n} satisfies a precondition")));
        }
    }
    let modes_path = dir.join("failure_modes.rfj");
    if records.is_empty() {
        log::info!("seed {seed}: no failures found");
        if modes_path.exists() {
            std::fs::remove_file(&modes_path).map_err(|e| Error::io(&modes_path, e))?;
        }
        return Ok(DiscoverOutcome {
            records,
            modes: None,
            dir,
        });
    }
    let modes = cluster_failures(&records, cfg.n_modes(), mix_seed(seed, 0xc105))?;
    save_artifact(&modes, seed, &modes_path)?;
    let mut w = csv::Writer::from_path(dir.join("modes.csv"))?;
    w.write_record(["mode", "size", "weight"])?;
    for (i, a) in modes.sizes.iter().enumerate() {
        w.write_record([i.to_string(), a.to_string(), modes.gmm.weights[i].to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&dir, e))?;
    log::info!("seed {seed}: {} failures in {} modes", records.len(), modes.n_modes());
    Ok(DiscoverOutcome {
        records,
        modes: Some(modes),
        dir,
    })
}

pub fn load_or_discover(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<FailureModeSet> {
    let p = out
        .join(format!("{}-seed{seed}", Pipeline::Discover.name()))
        .join("failure_modes.rfj");
    if p.exists() {
        log::info!("seed {seed}: reusing {}", p.display());
        return Ok(load_artifact(&p)?.0);
    }
    cmd_discover(cfg, out, seed)?
        .modes
        .ok_or(Error::EmptyInput("failure records: discovery found no failures"))
}

// ----------------------------------------------------------------- training

/// Trains recoveries in the simulator, one REPS query per training.
pub struct EnvTrainer<'a> {
    pub library: RecoveryLibrary,
    pub env: &'a LatchEnv,
    pub modes: &'a FailureModeSet,
    pub preconds: &'a PreconditionSet,
    pub config: RecoveryConfig,
}

impl RecoveryTrainer for EnvTrainer<'_> {
    fn train(&mut self, i: usize, j: usize, seed: u64) -> Result<()> {
        train_recovery_datapoint(
            &mut self.library,
            i,
            j,
            self.env,
            self.modes,
            self.preconds,
            &self.config,
            seed,
        )
        .map(drop)
    }

    fn estimate(&mut self, i: usize, j: usize, seed: u64) -> Result<f64> {
        estimate_success_rate(
            self.library.skill(i, j),
            j,
            self.env,
            self.modes,
            self.preconds,
            self.config.n_eval,
            self.config.obs_sigma,
            seed,
            self.config.exec,
        )
    }
}

/// Optimistic recovery graph with every recovery probability at zero.
pub fn recovery_graph_for(nominal_costs: &[f64], n_modes: usize) -> Result<SymbolicGraph> {
    let max = nominal_costs.iter().copied().fold(0.0, f64::max);
    let q = vec![vec![0.0; nominal_costs.len() + 1]; n_modes];
    SymbolicGraph::recovery_graph(nominal_costs, &q, 0.0, C_FAIL_COST_MULTIPLE * max, DEFAULT_GAMMA)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub library: RecoveryLibrary,
    pub graph: SymbolicGraph,
    pub allocation: AllocationResult,
    pub dir: PathBuf,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<TrainOutcome> {
    let (preconds, costs) = load_or_chain(cfg, out, seed)?;
    let modes = load_or_discover(cfg, out, seed)?;
    let dir = prepare_dir(out, &train_dir_name(cfg.strategy), seed, cfg)?;
    let env = cfg.env()?;
    let rcfg = cfg.recovery_config();
    let graph = recovery_graph_for(&costs, modes.n_modes())?;
    let mut trainer = EnvTrainer {
        library: RecoveryLibrary::new(modes.n_modes(), preconds.n_targets(), rcfg.k, default_scale(&env)),
        env: &env,
        modes: &modes,
        preconds: &preconds,
        config: rcfg,
    };
    let allocation = run_allocation(
        cfg.strategy,
        &mut trainer,
        &graph,
        &modes.sizes,
        &cfg.allocator,
        mix_seed(seed, 0x7a1),
    )?;
    let mut library = trainer.library;
    library.q = allocation.state.q.clone();
    let graph = graph.with_recovery_probs(&library.q)?;

    save_artifact(&library, seed, dir.join("library.rfj"))?;
    save_artifact(&graph, seed, dir.join("graph.rfj"))?;
    save_artifact(&allocation.state, seed, dir.join("allocator_state.rfj"))?;
    write_rows_csv(&allocation.rows, dir.join("rounds.csv"))?;
    write_counts_csv(&allocation.state.train_counts, dir.join("counts.csv"))?;
    write_matrix_csv(&library.q, dir.join("q.csv"))?;
    write_q_trace(&allocation, modes.n_modes(), preconds.n_targets(), &dir.join("q_trace.csv"))?;
    log::info!(
        "seed {seed}: {} rounds, final failure value {:.4}",
        allocation.rows.len(),
        allocation.final_fv()
    );
    Ok(TrainOutcome {
        library,
        graph,
        allocation,
        dir,
    })
}

/// Long-format q matrix after every round.
fn write_q_trace(a: &AllocationResult, n: usize, m: usize, path: &Path) -> Result<()> {
    let mut q = vec![vec![0.0f64; m]; n];
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "mode", "target", "q"])?;
    for r in &a.rows {
        q[r.i][r.j] = q[r.i][r.j].max(r.q_new);
        for (i, row) in q.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                w.write_record([r.round.to_string(), i.to_string(), j.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_or_train(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<(RecoveryLibrary, SymbolicGraph)> {
    let dir = out.join(format!("{}-seed{seed}", train_dir_name(cfg.strategy)));
    let (l, g) = (dir.join("library.rfj"), dir.join("graph.rfj"));
    if l.exists() && g.exists() {
        log::info!("seed {seed}: reusing {}", l.display());
        return Ok((load_artifact(&l)?.0, load_artifact(&g)?.0));
    }
    let t = cmd_train(cfg, out, seed)?;
    Ok((t.library, t.graph))
}

// --------------------------------------------------------------- evaluation

/// Everything the learned-recovery policy needs at run time.
#[derive(Debug, Clone)]
pub struct LearnedRecovery {
    pub modes: FailureModeSet,
    pub library: RecoveryLibrary,
    /// Recovery target chosen by the planner for every failure mode.
    pub targets: Vec<usize>,
}

impl LearnedRecovery {
    pub fn new(modes: FailureModeSet, library: RecoveryLibrary, graph: &SymbolicGraph) -> Result<Self> {
        let g = graph.with_recovery_probs(&library.q)?;
        let values = value_iteration(&g, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let policy = extract_policy(&g, &values)?;
        let n_safe = g.n_safe();
        let targets = (0..modes.n_modes())
            .map(|i| {
                let c = policy
                    .get(&SymbolId::failure(i))
                    .ok_or_else(|| Error::MalformedGraph(format!("no policy for failure mode {i}")))?;
                target_index(c.edge.to, n_safe)
                    .ok_or_else(|| Error::MalformedGraph("recovery into a non-target symbol".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LearnedRecovery {
            modes,
            library,
            targets,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpisodeEnd {
    /// Goal reached, or the open-loop chain ran out.
    Finished,
    /// The policy gave up in an all-fail state.
    Halted,
    ExecutionCap,
    TravelCap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub cost: f64,
    pub executions: usize,
    /// Executions spent on recoveries or heuristic corrections.
    pub recoveries: usize,
    pub end: EpisodeEnd,
}

struct Episode<'a> {
    env: &'a LatchEnv,
    state: WorldState,
    est: crate::env::Estimator,
    rng: rand_chacha::ChaCha8Rng,
    cost: f64,
    executions: usize,
    recoveries: usize,
    max_executions: usize,
    travel_cap: f64,
}

impl Episode<'_> {
    fn budget_left(&self) -> bool {
        self.executions < self.max_executions && self.cost < self.travel_cap
    }

    fn run(&mut self, plan: &[Waypoint]) {
        let limit = self.env.config.max_skill_travel.min(self.travel_cap - self.cost);
        let (next, c) = self.env.execute_plan(&self.state, plan, limit);
        self.state = next;
        self.cost += c;
        self.executions += 1;
        self.est.advance(self.state.handle_pos_true, &mut self.rng);
    }

    fn estimated_features(&self) -> Vec<f64> {
        self.env.features_with_mount(&self.state, self.est.obs)
    }
}

/// One evaluation episode under the halving estimator.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    env: &LatchEnv,
    preconds: &PreconditionSet,
    policy: EvalPolicy,
    learned: Option<&LearnedRecovery>,
    sigma: f64,
    max_executions: usize,
    travel_cap: f64,
    seed: u64,
) -> Result<EpisodeOutcome> {
    let obs = ObservationModel::new(sigma, ObservationMode::HalvingEstimator)?;
    let (state, est) = env.reset(seed, obs);
    let start = state.clone();
    let mut ep = Episode {
        env,
        state,
        est,
        rng: rng_for(seed, 0x0b5),
        cost: 0.0,
        executions: 0,
        recoveries: 0,
        max_executions,
        travel_cap,
    };
    let chain = NominalChain::latch();
    if policy == EvalPolicy::OpenLoop {
        for &skill in &chain.skills {
            if !ep.budget_left() {
                break;
            }
            let plan = skill.plan(ep.est.obs, &env.config);
            ep.run(&plan);
        }
        return Ok(ep.finish(false));
    }
    let mut last: Option<(NominalSkill, Vec<Waypoint>, WorldState)> = None;
    let mut retried = false;
    let mut halted = false;
    while ep.budget_left() && !env.goal_predicate(&ep.state) {
        let f = ep.estimated_features();
        if let Some(i) = preconds.highest_satisfied(&f)? {
            let skill = chain.skills[i];
            let plan = skill.plan(ep.est.obs, &env.config);
            let before = ep.state.clone();
            ep.run(&plan);
            last = Some((skill, plan, before));
            retried = false;
            continue;
        }
        if preconds.goal(&f) {
            break;
        }
        halted = true;
        match policy {
            EvalPolicy::OpenLoop | EvalPolicy::NoRecovery => break,
            EvalPolicy::Retry => {
                if retried {
                    break;
                }
                let skill = last.as_ref().map_or(chain.skills[0], |l| l.0);
                let plan = skill.plan(ep.est.obs, &env.config);
                ep.run(&plan);
                retried = true;
            }
            EvalPolicy::RecoverToPrev => {
                let Some((_, plan, before)) = last.take() else {
                    break;
                };
                ep.run(&reverse_plan(&plan, &before));
            }
            EvalPolicy::RecoverToStart => {
                let here = ep.state.ee_pos;
                let plan = [
                    Waypoint {
                        target: here,
                        close: false,
                    },
                    Waypoint {
                        target: start.ee_pos,
                        close: false,
                    },
                ];
                ep.run(&plan);
            }
            EvalPolicy::LearnedRecovery => {
                let l = learned.ok_or(Error::InvalidArgument("learned recovery needs a library".into()))?;
                let mode = classify_failure(&l.modes, &f)?;
                let skill = l.library.skill(mode, l.targets[mode]);
                if skill.is_empty() {
                    break;
                }
                let theta = clamp_theta(env, &knn_predict(skill, &f)?);
                ep.run(&theta_plan(&theta, ep.est.obs, &env.config)?);
            }
        }
        halted = false;
        ep.recoveries += 1;
    }
    Ok(ep.finish(halted))
}

impl Episode<'_> {
    fn finish(&self, halted: bool) -> EpisodeOutcome {
        let end = if halted {
            EpisodeEnd::Halted
        } else if self.executions >= self.max_executions && !self.env.goal_predicate(&self.state) {
            EpisodeEnd::ExecutionCap
        } else if self.cost >= self.travel_cap && !self.env.goal_predicate(&self.state) {
            EpisodeEnd::TravelCap
        } else {
            EpisodeEnd::Finished
        };
        EpisodeOutcome {
            success: self.env.goal_predicate(&self.state),
            cost: self.cost,
            executions: self.executions,
            recoveries: self.recoveries,
            end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub policy: String,
    pub travel_capped: bool,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub executions_mean: f64,
    pub recoveries_mean: f64,
    pub halted: usize,
    pub execution_capped: usize,
    pub travel_capped_out: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    env: &LatchEnv,
    preconds: &PreconditionSet,
    policy: EvalPolicy,
    learned: Option<&LearnedRecovery>,
    settings: &EvaluationSettings,
    travel_cap: Option<f64>,
    seed: u64,
    exec: Exec,
) -> Result<EvalRow> {
    let cap = travel_cap.unwrap_or(f64::INFINITY);
    let outcomes = map_indexed(settings.n_episodes, exec, |e| {
        run_episode(
            env,
            preconds,
            policy,
            learned,
            settings.sigma,
            settings.max_executions,
            cap,
            mix_seed(seed, e as u64),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = outcomes.len().max(1) as f64;
    let costs: Vec<f64> = outcomes.iter().map(|o| o.cost).collect();
    let successes = outcomes.iter().filter(|o| o.success).count();
    let ends = |e: EpisodeEnd| outcomes.iter().filter(|o| o.end == e).count();
    Ok(EvalRow {
        policy: policy.name().to_string(),
        travel_capped: travel_cap.is_some(),
        episodes: outcomes.len(),
        successes,
        success_rate: successes as f64 / n,
        cost_mean: crate::stats::mean(&costs),
        cost_std: crate::stats::sample_std(&costs),
        executions_mean: outcomes.iter().map(|o| o.executions as f64).sum::<f64>() / n,
        recoveries_mean: outcomes.iter().map(|o| o.recoveries as f64).sum::<f64>() / n,
        halted: ends(EpisodeEnd::Halted),
        execution_capped: ends(EpisodeEnd::ExecutionCap),
        travel_capped_out: ends(EpisodeEnd::TravelCap),
    })
}

#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub rows: Vec<EvalRow>,
    pub dir: PathBuf,
}

impl EvaluateOutcome {
    pub fn rate(&self, policy: EvalPolicy, capped: bool) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.policy == policy.name() && r.travel_capped == capped)
            .map(|r| r.success_rate)
    }
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<EvaluateOutcome> {
    let (preconds, _) = load_or_chain(cfg, out, seed)?;
    let needs_library = cfg.evaluation.policies.contains(&EvalPolicy::LearnedRecovery);
    let learned = if needs_library {
        let modes = load_or_discover(cfg, out, seed)?;
        let (library, graph) = load_or_train(cfg, out, seed)?;
        Some(LearnedRecovery::new(modes, library, &graph)?)
    } else {
        None
    };
    let dir = prepare_dir(out, Pipeline::Evaluate.name(), seed, cfg)?;
    let env = cfg.env()?;
    let mut caps = vec![Some(env.config.max_episode_travel)];
    if cfg.evaluation.report_uncapped {
        caps.push(None);
    }
    let eval_seed = mix_seed(seed, 0xe7a1);
    let mut rows = Vec::new();
    for cap in caps {
        for &p in &cfg.evaluation.policies {
            // every policy sees the same episode seeds
            let row = evaluate_policy(&env, &preconds, p, learned.as_ref(), &cfg.evaluation, cap, eval_seed, cfg.exec)?;
            log::info!(
                "seed {seed}: {:<17} capped={:<5} success {:.3}",
                row.policy,
                row.travel_capped,
                row.success_rate
            );
            rows.push(row);
        }
    }
    let mut w = csv::Writer::from_path(dir.join("evaluation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&dir, e))?;
    if let Some(l) = &learned {
        let mut w = csv::Writer::from_path(dir.join("recovery_targets.csv"))?;
        w.write_record(["mode", "target", "q"])?;
        for (i, &j) in l.targets.iter().enumerate() {
            w.write_record([i.to_string(), j.to_string(), l.library.q[i][j].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&dir, e))?;
    }
    Ok(EvaluateOutcome { rows, dir })
}

// ---------------------------------------------------------------- synthetic

#[derive(Debug, Clone)]
pub struct SyntheticOutcome {
    pub round_robin: AllocationResult,
    pub value_ucl: AllocationResult,
    pub dir: PathBuf,
}

impl SyntheticOutcome {
    /// Rounds Value-UCL needs to reach round-robin's best failure value.
    pub fn rounds_to_parity(&self) -> Option<usize> {
        let best = self
            .round_robin
            .fv_trace()
            .into_iter()
            .fold(self.round_robin.initial_fv, f64::max);
        rounds_to_reach(&self.value_ucl.fv_trace(), best)
    }
}

pub fn cmd_synthetic_allocation(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<SyntheticOutcome> {
    let dir = prepare_dir(out, Pipeline::SyntheticAllocation.name(), seed, cfg)?;
    let s = &cfg.synthetic;
    let set = crate::synthetic::generate_curve_set(&s.curves, seed)?;
    write_json(&set, dir.join("curves.json"))?;
    let acfg = AllocatorConfig {
        budget: s.budget,
        ..cfg.allocator.clone()
    };
    let rr = run_synthetic(Strategy::RoundRobin, &set, &s.nominal_costs, &acfg, s.noise, seed)?;
    let ucl = run_synthetic(Strategy::ValueUcl, &set, &s.nominal_costs, &acfg, s.noise, seed)?;
    write_rows_csv(&rr.rows, dir.join("rounds_rr.csv"))?;
    write_rows_csv(&ucl.rows, dir.join("rounds_ucl.csv"))?;
    write_counts_csv(&rr.state.train_counts, dir.join("counts_rr.csv"))?;
    write_counts_csv(&ucl.state.train_counts, dir.join("counts_ucl.csv"))?;
    let o = SyntheticOutcome {
        round_robin: rr,
        value_ucl: ucl,
        dir,
    };
    let mut w = csv::Writer::from_path(o.dir.join("summary.csv"))?;
    w.write_record(["strategy", "initial_fv", "final_fv", "rounds_to_rr_best"])?;
    for (name, r) in [("rr", &o.round_robin), ("ucl", &o.value_ucl)] {
        let parity = if name == "ucl" {
            o.rounds_to_parity().map_or(String::new(), |v| v.to_string())
        } else {
            String::new()
        };
        w.write_record([name.to_string(), r.initial_fv.to_string(), r.final_fv().to_string(), parity])?;
    }
    w.flush().map_err(|e| Error::io(&o.dir, e))?;
    Ok(o)
}

// ------------------------------------------------------------------ seeds

/// Runs `pipeline` for every configured seed and writes the cross-seed
/// summary where one exists.
pub fn run_pipeline(pipeline: Pipeline, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seeds = &cfg.seeds;
    match pipeline {
        Pipeline::ChainPreconds => {
            collect(map_slice(seeds, cfg.exec, |&s| cmd_chain_preconds(cfg, out, s)))?;
        }
        Pipeline::Discover => {
            let res = collect(map_slice(seeds, cfg.exec, |&s| cmd_discover(cfg, out, s)))?;
            for (s, r) in seeds.iter().zip(&res) {
                match &r.modes {
                    None => println!("seed {s}: no failures found"),
                    Some(m) => println!("seed {s}: {} failures in {} modes", r.records.len(), m.n_modes()),
                }
            }
        }
        Pipeline::TrainRecoveries => {
            let res = collect(map_slice(seeds, cfg.exec, |&s| cmd_train(cfg, out, s)))?;
            let traces: Vec<Vec<f64>> = res.iter().map(|r| r.allocation.fv_trace()).collect();
            write_fv_summary(&traces, &out.join(format!("{}-summary.csv", train_dir_name(cfg.strategy))))?;
        }
        Pipeline::Evaluate => {
            let res = collect(map_slice(seeds, cfg.exec, |&s| cmd_evaluate(cfg, out, s)))?;
            write_eval_summary(&res, &out.join("evaluate-summary.csv"))?;
        }
        Pipeline::SyntheticAllocation => {
            let res = collect(map_slice(seeds, cfg.exec, |&s| cmd_synthetic_allocation(cfg, out, s)))?;
            for name in ["rr", "ucl"] {
                let traces: Vec<Vec<f64>> = res
                    .iter()
                    .map(|r| if name == "rr" { &r.round_robin } else { &r.value_ucl }.fv_trace())
                    .collect();
                write_fv_summary(&traces, &out.join(format!("synth-alloc-{name}-summary.csv")))?;
            }
        }
    }
    Ok(())
}

fn collect<T>(v: Vec<Result<T>>) -> Result<Vec<T>> {
    v.into_iter().collect()
}

/// Mean, min and max failure value per round across seeds.
pub fn write_fv_summary(traces: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "mean_fv", "min_fv", "max_fv"])?;
    let rounds = traces.iter().map(Vec::len).min().unwrap_or(0);
    for r in 0..rounds {
        let col: Vec<f64> = traces.iter().map(|t| t[r]).collect();
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        w.write_record([
            r.to_string(),
            crate::stats::mean(&col).to_string(),
            min.to_string(),
            max.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_eval_summary(res: &[EvaluateOutcome], path: &Path) -> Result<()> {
    let mut pooled: BTreeMap<(String, bool), (usize, usize, Vec<f64>)> = BTreeMap::new();
    for o in res {
        for r in &o.rows {
            let e = pooled.entry((r.policy.clone(), r.travel_capped)).or_default();
            e.0 += r.episodes;
            e.1 += r.successes;
            e.2.push(r.success_rate);
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["policy", "travel_capped", "episodes", "successes", "success_rate", "min_seed_rate", "max_seed_rate"])?;
    for ((p, capped), (n, s, rates)) in pooled {
        let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
        let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        w.write_record([
            p,
            capped.to_string(),
            n.to_string(),
            s.to_string(),
            (s as f64 / n.max(1) as f64).to_string(),
            min.to_string(),
            max.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
