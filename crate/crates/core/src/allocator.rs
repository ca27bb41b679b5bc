//! Training-budget allocation across recoveries: round-robin and Value-UCL.
//!
//! Value-UCL first trains every recovery `k_init` times in round-robin
//! order. After that it trains the recovery whose optimistic success rate,
//! an upper confidence limit on its recent rate of improvement, would raise
//! the failure value the most.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::mix_seed;
use crate::skill_graph::{graph_failure_value, SymbolicGraph};
use crate::stats::{mean, sample_std, t_quantile};

/// Bounded FIFO of the most recent success estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UclQueue {
    pub values: VecDeque<f64>,
    pub capacity: usize,
}

impl UclQueue {
    pub fn new(capacity: usize) -> Self {
        UclQueue {
            values: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn from_values(values: &[f64], capacity: usize) -> Self {
        let mut q = UclQueue::new(capacity);
        for &v in values {
            q.insert(v);
        }
        q
    }

    pub fn insert(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        if self.capacity > 0 {
            self.values.push_back(v);
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Upper confidence limit on the success rate after one more training
/// round: `min(q + max(mean(d) + t s / sqrt(n), 0), 1)` over the forward
/// differences `d` of the queue. A single difference has `s = 0`.
pub fn compute_ucl(queue: &UclQueue, current_q: f64, alpha: f64) -> Result<f64> {
    if queue.len() < 2 {
        return Err(Error::InsufficientHistory(queue.len()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidProbability(alpha));
    }
    let v: Vec<f64> = queue.values.iter().copied().collect();
    let diffs: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
    let n = diffs.len();
    let s = if n == 1 { 0.0 } else { sample_std(&diffs) };
    let t = t_quantile((1.0 + alpha) / 2.0, (n.saturating_sub(1)).max(1) as f64)?;
    let delta = mean(&diffs) + t * s / (n as f64).sqrt();
    Ok((current_q + delta.max(0.0)).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    RoundRobin,
    ValueUcl,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::RoundRobin => "rr",
            Strategy::ValueUcl => "ucl",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rr" | "round_robin" => Ok(Strategy::RoundRobin),
            "ucl" | "value_ucl" => Ok(Strategy::ValueUcl),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AllocatorConfig {
    /// Trainings every recovery receives before Value-UCL takes over.
    pub k_init: usize,
    /// Queue capacity.
    pub window: usize,
    pub alpha: f64,
    /// Training episodes per selection.
    pub eta: usize,
    /// Number of selection rounds.
    pub budget: usize,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        AllocatorConfig {
            k_init: 2,
            window: 3,
            alpha: 0.95,
            eta: 1,
            budget: 150,
        }
    }
}

impl AllocatorConfig {
    pub fn validate(&self, strategy: Strategy, n_skills: usize) -> Result<()> {
        if self.window < 2 {
            return Err(Error::InvalidArgument(format!("window must be at least 2, got {}", self.window)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidProbability(self.alpha));
        }
        if self.eta == 0 {
            return Err(Error::InvalidArgument("eta must be positive".into()));
        }
        if strategy == Strategy::ValueUcl && self.budget < self.k_init * n_skills {
            return Err(Error::InvalidArgument(format!(
                "budget {} cannot cover {} initial trainings of {} recoveries",
                self.budget, self.k_init, n_skills
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocatorState {
    pub q: Vec<Vec<f64>>,
    pub q_ucl: Vec<Vec<f64>>,
    pub queues: Vec<Vec<UclQueue>>,
    pub train_counts: Vec<Vec<usize>>,
    pub round: usize,
    pub config: AllocatorConfig,
}

impl AllocatorState {
    pub fn new(n_modes: usize, n_targets: usize, config: AllocatorConfig) -> Self {
        AllocatorState {
            q: vec![vec![0.0; n_targets]; n_modes],
            q_ucl: vec![vec![0.0; n_targets]; n_modes],
            queues: vec![vec![UclQueue::new(config.window); n_targets]; n_modes],
            train_counts: vec![vec![0; n_targets]; n_modes],
            round: 0,
            config,
        }
    }

    pub fn n_modes(&self) -> usize {
        self.q.len()
    }

    pub fn n_targets(&self) -> usize {
        self.q.first().map_or(0, Vec::len)
    }

    /// Applies `q_best = max(q_new, q)`, pushes it into the queue and
    /// refreshes the recovery's upper confidence limit.
    pub fn record(&mut self, i: usize, j: usize, q_new: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&q_new) {
            return Err(Error::InvalidProbability(q_new));
        }
        let best = q_new.max(self.q[i][j]);
        self.q[i][j] = best;
        self.queues[i][j].insert(best);
        self.q_ucl[i][j] = if self.queues[i][j].len() >= 2 {
            compute_ucl(&self.queues[i][j], best, self.config.alpha)?
        } else {
            best
        };
        self.train_counts[i][j] += 1;
        self.round += 1;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_modes(), self.n_targets());
        let lens: Vec<Vec<usize>> = vec![
            self.q.iter().map(Vec::len).collect(),
            self.q_ucl.iter().map(Vec::len).collect(),
            self.queues.iter().map(Vec::len).collect(),
            self.train_counts.iter().map(Vec::len).collect(),
        ];
        if n == 0 || lens.iter().any(|l| l.len() != n || l.iter().any(|&c| c != m)) {
            return Err(Error::InvariantViolation("allocator state shape".into()));
        }
        for (a, b) in self.q.iter().flatten().zip(self.q_ucl.iter().flatten()) {
            if !(0.0..=1.0).contains(a) || !(0.0..=1.0).contains(b) || b < a {
                return Err(Error::InvariantViolation(format!("q {a} / q_ucl {b} out of order or range")));
            }
        }
        if self.queues.iter().flatten().any(|q| q.len() > q.capacity) {
            return Err(Error::InvariantViolation("queue over capacity".into()));
        }
        let total: usize = self.train_counts.iter().flatten().sum();
        if total != self.round {
            return Err(Error::InvariantViolation(format!(
                "train counts sum to {total} after {} rounds",
                self.round
            )));
        }
        Ok(())
    }
}

/// Failure value of `graph` with recovery success probabilities `q`.
pub fn failure_value_of(graph: &SymbolicGraph, sizes: &[f64], q: &[Vec<f64>]) -> Result<f64> {
    graph_failure_value(&graph.with_recovery_probs(q)?, sizes)
}

/// Failure value with `q(i, j)` replaced by its upper confidence limit.
pub fn optimistic_failure_value(
    state: &AllocatorState,
    graph: &SymbolicGraph,
    sizes: &[f64],
    i: usize,
    j: usize,
) -> Result<f64> {
    let mut q = state.q.clone();
    q[i][j] = state.q_ucl[i][j];
    failure_value_of(graph, sizes, &q)
}

/// Least-trained recovery; ties go to the lowest `(i, j)`.
pub fn least_trained(state: &AllocatorState) -> (usize, usize) {
    let mut best = (0, 0);
    for (i, row) in state.train_counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c < state.train_counts[best.0][best.1] {
                best = (i, j);
            }
        }
    }
    best
}

pub fn select_round_robin(state: &AllocatorState) -> (usize, usize) {
    least_trained(state)
}

pub fn select_value_ucl(state: &AllocatorState, graph: &SymbolicGraph, sizes: &[f64]) -> Result<(usize, usize)> {
    let k = state.config.k_init;
    if state.train_counts.iter().flatten().any(|&c| c < k) {
        return Ok(least_trained(state));
    }
    let mut best = (0, 0);
    let mut best_fv = f64::NEG_INFINITY;
    for i in 0..state.n_modes() {
        for j in 0..state.n_targets() {
            let fv = optimistic_failure_value(state, graph, sizes, i, j)?;
            if fv > best_fv {
                best_fv = fv;
                best = (i, j);
            }
        }
    }
    Ok(best)
}

/// Source of training and success estimates for the allocation loop.
pub trait RecoveryTrainer {
    /// One training episode (one REPS query) of recovery `(i, j)`.
    fn train(&mut self, i: usize, j: usize, seed: u64) -> Result<()>;
    /// Fresh success estimate of recovery `(i, j)`.
    fn estimate(&mut self, i: usize, j: usize, seed: u64) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub round: usize,
    pub strategy: String,
    pub i: usize,
    pub j: usize,
    pub q_new: f64,
    pub q_ucl: f64,
    pub fv: f64,
}

#[derive(Debug, Clone)]
pub struct AllocationResult {
    pub state: AllocatorState,
    /// Failure value before any training.
    pub initial_fv: f64,
    pub rows: Vec<AllocationRow>,
}

impl AllocationResult {
    pub fn fv_trace(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.fv).collect()
    }

    pub fn final_fv(&self) -> f64 {
        self.rows.last().map_or(self.initial_fv, |r| r.fv)
    }
}

/// Runs `config.budget` selection rounds.
pub fn run_allocation<T: RecoveryTrainer>(
    strategy: Strategy,
    trainer: &mut T,
    graph: &SymbolicGraph,
    sizes: &[f64],
    config: &AllocatorConfig,
    seed: u64,
) -> Result<AllocationResult> {
    let n = graph.n_failure_modes();
    let m = graph.n_safe() + 1;
    if sizes.len() != n {
        return Err(Error::LengthMismatch {
            left: sizes.len(),
            right: n,
        });
    }
    config.validate(strategy, n * m)?;
    let mut state = AllocatorState::new(n, m, config.clone());
    let initial_fv = failure_value_of(graph, sizes, &state.q)?;
    let mut rows = Vec::with_capacity(config.budget);
    for round in 0..config.budget {
        let (i, j) = match strategy {
            Strategy::RoundRobin => select_round_robin(&state),
            Strategy::ValueUcl => select_value_ucl(&state, graph, sizes)?,
        };
        for e in 0..config.eta {
            trainer.train(i, j, mix_seed(seed, (round * config.eta + e) as u64))?;
        }
        let q_new = trainer.estimate(i, j, mix_seed(seed ^ 0xe57, round as u64))?;
        state.record(i, j, q_new)?;
        let fv = failure_value_of(graph, sizes, &state.q)?;
        log::debug!("{} round {round}: ({i}, {j}) q_new {q_new:.3} fv {fv:.4}", strategy.name());
        rows.push(AllocationRow {
            round,
            strategy: strategy.name().to_string(),
            i,
            j,
            q_new,
            q_ucl: state.q_ucl[i][j],
            fv,
        });
    }
    Ok(AllocationResult {
        state,
        initial_fv,
        rows,
    })
}

pub fn write_rows_csv(rows: &[AllocationRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows_csv(path: impl AsRef<Path>) -> Result<Vec<AllocationRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Allocation-count matrix with a `mode` column and one column per target.
pub fn write_counts_csv(counts: &[Vec<usize>], path: impl AsRef<Path>) -> Result<()> {
    write_matrix_csv(counts, path)
}

/// Any `n x m` matrix, one row per failure mode.
pub fn write_matrix_csv<T: ToString>(m: &[Vec<T>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let cols = m.first().map_or(0, Vec::len);
    let mut header = vec!["mode".to_string()];
    header.extend((0..cols).map(|j| format!("target_{j}")));
    w.write_record(&header)?;
    for (i, row) in m.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(ToString::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
