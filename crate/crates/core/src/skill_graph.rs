//! Symbolic skill graph, value iteration and the failure-value objective.
//!
//! Safe symbols are the preconditions of the nominal skills, failure modes
//! are clusters of discovered failure states, and two absorbing symbols
//! (`Goal`, `FailSink`) terminate every path. A recovery edge that fails
//! lands in `FailSink`, whose value is pinned at `-c_fail`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.99;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// `c_fail` defaults to this multiple of the largest nominal edge cost.
pub const C_FAIL_COST_MULTIPLE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SymbolKind {
    SafeState,
    FailureMode,
    Goal,
    FailSink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SymbolId {
    pub index: usize,
    pub kind: SymbolKind,
}

impl SymbolId {
    pub const GOAL: SymbolId = SymbolId {
        index: 0,
        kind: SymbolKind::Goal,
    };
    pub const FAIL: SymbolId = SymbolId {
        index: 0,
        kind: SymbolKind::FailSink,
    };

    pub fn safe(index: usize) -> Self {
        SymbolId {
            index,
            kind: SymbolKind::SafeState,
        }
    }

    pub fn failure(index: usize) -> Self {
        SymbolId {
            index,
            kind: SymbolKind::FailureMode,
        }
    }

    pub fn is_absorbing(&self) -> bool {
        matches!(self.kind, SymbolKind::Goal | SymbolKind::FailSink)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Nominal,
    Recovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillEdge {
    pub from: SymbolId,
    pub to: SymbolId,
    pub kind: EdgeKind,
    pub cost: f64,
    pub success_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicGraph {
    pub symbols: Vec<SymbolId>,
    pub edges: Vec<SkillEdge>,
    pub gamma: f64,
    pub c_fail: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValueTable {
    pub value: BTreeMap<SymbolId, f64>,
}

impl ValueTable {
    pub fn get(&self, s: SymbolId) -> f64 {
        self.value.get(&s).copied().unwrap_or(f64::NAN)
    }
}

/// Result of `extract_policy` for one symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyChoice {
    pub edge_index: usize,
    pub edge: SkillEdge,
}

impl SymbolicGraph {
    /// Builds the optimistic recovery graph: a nominal chain
    /// `safe_0 -> ... -> safe_{k-1} -> Goal` plus one recovery edge from every
    /// failure mode to every safe symbol and the goal.
    ///
    /// `q[i][j]` is the success probability of recovering from mode `i` to
    /// target `j`, where targets `0..k` are the safe states and `k` is Goal.
    pub fn recovery_graph(
        nominal_costs: &[f64],
        q: &[Vec<f64>],
        recovery_cost: f64,
        c_fail: f64,
        gamma: f64,
    ) -> Result<Self> {
        let k = nominal_costs.len();
        if k == 0 {
            return Err(Error::EmptyInput("nominal chain"));
        }
        let mut symbols: Vec<SymbolId> = (0..k).map(SymbolId::safe).collect();
        symbols.push(SymbolId::GOAL);
        symbols.extend((0..q.len()).map(SymbolId::failure));
        symbols.push(SymbolId::FAIL);
        let mut edges = Vec::new();
        for (i, &c) in nominal_costs.iter().enumerate() {
            let to = if i + 1 < k { SymbolId::safe(i + 1) } else { SymbolId::GOAL };
            edges.push(SkillEdge {
                from: SymbolId::safe(i),
                to,
                kind: EdgeKind::Nominal,
                cost: c,
                success_prob: 1.0,
            });
        }
        for (i, row) in q.iter().enumerate() {
            if row.len() != k + 1 {
                return Err(Error::LengthMismatch {
                    left: row.len(),
                    right: k + 1,
                });
            }
            for (j, &p) in row.iter().enumerate() {
                edges.push(SkillEdge {
                    from: SymbolId::failure(i),
                    to: target_symbol(j, k),
                    kind: EdgeKind::Recovery,
                    cost: recovery_cost,
                    success_prob: p,
                });
            }
        }
        let g = SymbolicGraph {
            symbols,
            edges,
            gamma,
            c_fail,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn n_safe(&self) -> usize {
        self.symbols.iter().filter(|s| s.kind == SymbolKind::SafeState).count()
    }

    pub fn n_failure_modes(&self) -> usize {
        self.symbols.iter().filter(|s| s.kind == SymbolKind::FailureMode).count()
    }

    /// Index of the recovery edge `mode -> target` in a graph built by
    /// [`SymbolicGraph::recovery_graph`].
    pub fn recovery_edge_index(&self, mode: usize, target: usize) -> Option<usize> {
        let to = target_symbol(target, self.n_safe());
        self.edges.iter().position(|e| {
            e.kind == EdgeKind::Recovery && e.from == SymbolId::failure(mode) && e.to == to
        })
    }

    /// Replaces every recovery success probability with `q[i][j]`.
    pub fn with_recovery_probs(&self, q: &[Vec<f64>]) -> Result<Self> {
        let k = self.n_safe();
        let mut g = self.clone();
        for e in &mut g.edges {
            if e.kind == EdgeKind::Recovery {
                let j = target_index(e.to, k).ok_or_else(|| {
                    Error::MalformedGraph("recovery edge into a non-safe symbol".into())
                })?;
                e.success_prob = *q
                    .get(e.from.index)
                    .and_then(|r| r.get(j))
                    .ok_or(Error::LengthMismatch {
                        left: q.len(),
                        right: self.n_failure_modes(),
                    })?;
            }
        }
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let count = |k: SymbolKind| self.symbols.iter().filter(|s| s.kind == k).count();
        if count(SymbolKind::Goal) != 1 || count(SymbolKind::FailSink) != 1 {
            return Err(Error::MalformedGraph(
                "need exactly one Goal and one FailSink".into(),
            ));
        }
        if !(self.c_fail > 0.0) || !self.c_fail.is_finite() {
            return Err(Error::MalformedGraph(format!("c_fail must be positive, got {}", self.c_fail)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::MalformedGraph(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.symbols {
            if !seen.insert(*s) {
                return Err(Error::MalformedGraph(format!("duplicate symbol {s:?}")));
            }
        }
        for e in &self.edges {
            if !seen.contains(&e.from) || !seen.contains(&e.to) {
                return Err(Error::MalformedGraph(format!("edge references unknown symbol: {e:?}")));
            }
            if e.from.is_absorbing() {
                return Err(Error::MalformedGraph(format!("absorbing symbol {:?} has an outgoing edge", e.from)));
            }
            if !(0.0..=1.0).contains(&e.success_prob) || !(e.cost >= 0.0) || !e.cost.is_finite() {
                return Err(Error::MalformedGraph(format!("bad edge parameters: {e:?}")));
            }
            if e.kind == EdgeKind::Recovery && e.from.kind != SymbolKind::FailureMode {
                return Err(Error::MalformedGraph("recovery edge must start at a failure mode".into()));
            }
        }
        for s in self.symbols.iter().filter(|s| !s.is_absorbing()) {
            let out: Vec<_> = self.edges.iter().filter(|e| e.from == *s).collect();
            if out.is_empty() {
                return Err(Error::MalformedGraph(format!("{s:?} has no outgoing edge")));
            }
            if s.kind == SymbolKind::SafeState && !out.iter().any(|e| e.kind == EdgeKind::Nominal) {
                return Err(Error::MalformedGraph(format!("{s:?} has no nominal edge")));
            }
        }
        self.check_nominal_acyclic()
    }

    fn check_nominal_acyclic(&self) -> Result<()> {
        // Kahn's algorithm over nominal edges
        let idx: BTreeMap<SymbolId, usize> =
            self.symbols.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let n = self.symbols.len();
        let mut indeg = vec![0usize; n];
        let mut adj = vec![Vec::new(); n];
        for e in self.edges.iter().filter(|e| e.kind == EdgeKind::Nominal) {
            adj[idx[&e.from]].push(idx[&e.to]);
            indeg[idx[&e.to]] += 1;
        }
        let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut visited = 0;
        while let Some(u) = stack.pop() {
            visited += 1;
            for &v in &adj[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    stack.push(v);
                }
            }
        }
        if visited != n {
            return Err(Error::MalformedGraph("nominal edges contain a cycle".into()));
        }
        Ok(())
    }

    fn backup(&self, e: &SkillEdge, v: &BTreeMap<SymbolId, f64>) -> f64 {
        let g = self.gamma;
        -e.cost + e.success_prob * g * v[&e.to] + (1.0 - e.success_prob) * g * (-self.c_fail)
    }

    fn boundary(&self) -> BTreeMap<SymbolId, f64> {
        self.symbols
            .iter()
            .map(|s| {
                let v = match s.kind {
                    SymbolKind::FailSink => -self.c_fail,
                    _ => 0.0,
                };
                (*s, v)
            })
            .collect()
    }
}

/// Index `j` in the recovery target list: safe states then Goal.
pub fn target_symbol(j: usize, n_safe: usize) -> SymbolId {
    if j < n_safe {
        SymbolId::safe(j)
    } else {
        SymbolId::GOAL
    }
}

pub fn target_index(s: SymbolId, n_safe: usize) -> Option<usize> {
    match s.kind {
        SymbolKind::SafeState => Some(s.index),
        SymbolKind::Goal => Some(n_safe),
        _ => None,
    }
}

pub fn value_iteration(graph: &SymbolicGraph, tol: f64, max_iter: usize) -> Result<ValueTable> {
    value_iteration_traced(graph, tol, max_iter).map(|(v, _)| v)
}

/// Jacobi value iteration; also returns the sup-norm residual of every sweep.
pub fn value_iteration_traced(
    graph: &SymbolicGraph,
    tol: f64,
    max_iter: usize,
) -> Result<(ValueTable, Vec<f64>)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    graph.validate()?;
    let mut v = graph.boundary();
    let mut residuals = Vec::new();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let mut next = v.clone();
        residual = 0.0f64;
        for s in graph.symbols.iter().filter(|s| !s.is_absorbing()) {
            let best = graph
                .edges
                .iter()
                .filter(|e| e.from == *s)
                .map(|e| graph.backup(e, &v))
                .fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((best - v[s]).abs());
            next.insert(*s, best);
        }
        v = next;
        residuals.push(residual);
        if residual <= tol {
            return Ok((ValueTable { value: v }, residuals));
        }
    }
    Err(Error::NonConvergence {
        residual,
        iterations: max_iter,
    })
}

/// Greedy policy w.r.t. `values`; ties go to the lowest edge index.
pub fn extract_policy(
    graph: &SymbolicGraph,
    values: &ValueTable,
) -> Result<BTreeMap<SymbolId, PolicyChoice>> {
    let v = &values.value;
    let mut out = BTreeMap::new();
    for s in graph.symbols.iter().filter(|s| !s.is_absorbing()) {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in graph.edges.iter().enumerate().filter(|(_, e)| e.from == *s) {
            if !v.contains_key(&e.to) {
                return Err(Error::MalformedGraph(format!("no value for {:?}", e.to)));
            }
            let q = graph.backup(e, v);
            let better = match best {
                None => true,
                Some((_, b)) => q > b + 1e-12 * b.abs().max(1.0),
            };
            if better {
                best = Some((i, q));
            }
        }
        let (i, _) = best.ok_or_else(|| Error::MalformedGraph(format!("{s:?} has no outgoing edge")))?;
        out.insert(
            *s,
            PolicyChoice {
                edge_index: i,
                edge: graph.edges[i].clone(),
            },
        );
    }
    Ok(out)
}

/// `max_j [ q_j V_j - (1 - q_j) c_fail ]`.
pub fn failure_mode_value(q_row: &[f64], safe_values: &[f64], c_fail: f64) -> Result<f64> {
    if q_row.len() != safe_values.len() {
        return Err(Error::LengthMismatch {
            left: q_row.len(),
            right: safe_values.len(),
        });
    }
    if q_row.is_empty() {
        return Err(Error::EmptyInput("q_row"));
    }
    Ok(q_row
        .iter()
        .zip(safe_values)
        .map(|(q, v)| q * v - (1.0 - q) * c_fail)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Size-weighted mean of failure-mode values.
pub fn failure_value(mode_values: &[f64], cluster_sizes: &[f64]) -> Result<f64> {
    if mode_values.len() != cluster_sizes.len() {
        return Err(Error::LengthMismatch {
            left: mode_values.len(),
            right: cluster_sizes.len(),
        });
    }
    if mode_values.is_empty() {
        return Err(Error::EmptyInput("mode_values"));
    }
    if cluster_sizes.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidArgument("cluster sizes must be positive".into()));
    }
    let total: f64 = cluster_sizes.iter().sum();
    Ok(mode_values
        .iter()
        .zip(cluster_sizes)
        .map(|(v, a)| a / total * v)
        .sum())
}

/// Failure value of the graph: value iteration, then the size-weighted mean
/// over failure-mode values.
pub fn graph_failure_value(graph: &SymbolicGraph, cluster_sizes: &[f64]) -> Result<f64> {
    let values = value_iteration(graph, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let modes: Vec<f64> = (0..graph.n_failure_modes())
        .map(|i| values.get(SymbolId::failure(i)))
        .collect();
    failure_value(&modes, cluster_sizes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain_graph() -> SymbolicGraph {
        SymbolicGraph::recovery_graph(&[1.0, 1.0], &[], 0.0, 10.0, 1.0).unwrap()
    }

    #[test]
    fn deterministic_chain_costs_add() {
        let v = value_iteration(&chain_graph(), 1e-12, 100).unwrap();
        assert_eq!(v.get(SymbolId::GOAL), 0.0);
        assert_eq!(v.get(SymbolId::FAIL), -10.0);
        assert_abs_diff_eq!(v.get(SymbolId::safe(1)), -1.0);
        assert_abs_diff_eq!(v.get(SymbolId::safe(0)), -2.0);
    }

    #[test]
    fn unlearned_modes_take_the_penalty() {
        let g = SymbolicGraph::recovery_graph(&[1.0, 2.0], &[vec![0.0; 3], vec![0.0; 3]], 0.0, 10.0, 1.0)
            .unwrap();
        let v = value_iteration(&g, 1e-12, 100).unwrap();
        assert_abs_diff_eq!(v.get(SymbolId::failure(0)), -10.0);
        assert_abs_diff_eq!(graph_failure_value(&g, &[1.0, 4.0]).unwrap(), -10.0, epsilon = 1e-12);
    }

    #[test]
    fn gamma_one_reproduces_mode_value_formula() {
        let q = vec![vec![0.3, 0.6, 0.2]];
        let g = SymbolicGraph::recovery_graph(&[0.5, 0.25], &q, 0.0, 20.0, 1.0).unwrap();
        let v = value_iteration(&g, 1e-12, 100).unwrap();
        let safe = [v.get(SymbolId::safe(0)), v.get(SymbolId::safe(1)), 0.0];
        let want = failure_mode_value(&q[0], &safe, 20.0).unwrap();
        assert_abs_diff_eq!(v.get(SymbolId::failure(0)), want, epsilon = 1e-12);
    }

    #[test]
    fn mode_value_examples() {
        assert_eq!(failure_mode_value(&[0.0; 3], &[-1.0, -5.0, 3.0], 10.0).unwrap(), -10.0);
        assert_abs_diff_eq!(failure_mode_value(&[0.5], &[-2.0], 10.0).unwrap(), -6.0);
        assert_abs_diff_eq!(failure_mode_value(&[1.0, 0.2], &[-3.0, 0.0], 10.0).unwrap(), -3.0);
        assert!(matches!(
            failure_mode_value(&[0.1], &[1.0, 2.0], 1.0),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn failure_value_examples() {
        assert_abs_diff_eq!(failure_value(&[-10.0, -2.0], &[1.0, 3.0]).unwrap(), -4.0);
        assert_abs_diff_eq!(failure_value(&[-7.5], &[0.3]).unwrap(), -7.5);
        assert!(matches!(failure_value(&[], &[]), Err(Error::EmptyInput(_))));
        assert!(matches!(failure_value(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn policy_prefers_higher_valued_target() {
        // mode 0 can recover to safe_0 (far from goal) or safe_1 (close)
        let g = SymbolicGraph::recovery_graph(&[4.0, 1.0], &[vec![0.9, 0.9, 0.0]], 0.0, 10.0, 1.0)
            .unwrap();
        let v = value_iteration(&g, 1e-12, 100).unwrap();
        assert_abs_diff_eq!(v.get(SymbolId::safe(0)), -5.0);
        assert_abs_diff_eq!(v.get(SymbolId::safe(1)), -1.0);
        let pi = extract_policy(&g, &v).unwrap();
        assert_eq!(pi[&SymbolId::failure(0)].edge.to, SymbolId::safe(1));
    }

    #[test]
    fn ties_break_to_lowest_edge() {
        let g = SymbolicGraph::recovery_graph(&[1.0], &[vec![0.0, 0.0]], 0.0, 10.0, 0.99).unwrap();
        let v = value_iteration(&g, 1e-12, 100).unwrap();
        for _ in 0..5 {
            let pi = extract_policy(&g, &v).unwrap();
            assert_eq!(pi[&SymbolId::failure(0)].edge_index, g.recovery_edge_index(0, 0).unwrap());
        }
    }

    #[test]
    fn malformed_graphs_rejected() {
        let mut g = chain_graph();
        g.edges.pop();
        assert!(matches!(value_iteration(&g, 1e-9, 10), Err(Error::MalformedGraph(_))));
        let mut g = chain_graph();
        g.edges.push(SkillEdge {
            from: SymbolId::safe(1),
            to: SymbolId::safe(0),
            kind: EdgeKind::Nominal,
            cost: 1.0,
            success_prob: 1.0,
        });
        assert!(g.validate().is_err());
        let mut g = chain_graph();
        g.symbols.push(SymbolId { index: 1, kind: SymbolKind::Goal });
        assert!(g.validate().is_err());
    }

    #[test]
    fn non_convergence_reports_residual() {
        let g = SymbolicGraph::recovery_graph(&[1.0; 6], &[], 0.0, 10.0, 1.0).unwrap();
        match value_iteration(&g, 1e-12, 2) {
            Err(Error::NonConvergence { residual, iterations }) => {
                assert!(residual > 0.0);
                assert_eq!(iterations, 2);
            }
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn json_field_names() {
        let g = SymbolicGraph::recovery_graph(&[1.0], &[vec![0.5, 0.25]], 0.0, 10.0, 0.99).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        for key in ["symbols", "edges", "gamma", "c_fail", "from", "to", "kind", "cost", "success_prob"] {
            assert!(s.contains(&format!("\"{key}\"")), "{key}");
        }
        let back: SymbolicGraph = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }

    // --- brute-force oracle -------------------------------------------------

    pub(crate) fn random_graph(rng: &mut ChaCha8Rng, gamma: f64) -> SymbolicGraph {
        let n_safe = rng.random_range(1..=3);
        let n_modes = rng.random_range(1..=(6 - n_safe).min(3));
        let mut symbols: Vec<SymbolId> = (0..n_safe).map(SymbolId::safe).collect();
        symbols.push(SymbolId::GOAL);
        symbols.extend((0..n_modes).map(SymbolId::failure));
        symbols.push(SymbolId::FAIL);
        let mut edges = Vec::new();
        for i in 0..n_safe {
            let n_out = rng.random_range(1..=3);
            for _ in 0..n_out {
                // nominal edges only point forward
                let t = rng.random_range(i + 1..=n_safe);
                edges.push(SkillEdge {
                    from: SymbolId::safe(i),
                    to: target_symbol(t, n_safe),
                    kind: EdgeKind::Nominal,
                    cost: rng.random_range(0.0..3.0),
                    success_prob: if rng.random_bool(0.5) { 1.0 } else { rng.random() },
                });
            }
        }
        for i in 0..n_modes {
            let n_out = rng.random_range(1..=3);
            for _ in 0..n_out {
                let to = if rng.random_bool(0.25) {
                    SymbolId::failure(rng.random_range(0..n_modes))
                } else {
                    target_symbol(rng.random_range(0..=n_safe), n_safe)
                };
                edges.push(SkillEdge {
                    from: SymbolId::failure(i),
                    to,
                    kind: EdgeKind::Recovery,
                    cost: rng.random_range(0.0..2.0),
                    success_prob: rng.random(),
                });
            }
        }
        SymbolicGraph {
            symbols,
            edges,
            gamma,
            c_fail: rng.random_range(5.0..50.0),
        }
    }

    /// Optimal values by enumerating every deterministic policy and solving
    /// its linear evaluation system exactly.
    pub(crate) fn brute_force_values(g: &SymbolicGraph) -> BTreeMap<SymbolId, f64> {
        let states: Vec<SymbolId> = g.symbols.iter().copied().filter(|s| !s.is_absorbing()).collect();
        let choices: Vec<Vec<&SkillEdge>> = states
            .iter()
            .map(|s| g.edges.iter().filter(|e| e.from == *s).collect())
            .collect();
        let pos = |s: SymbolId| states.iter().position(|x| *x == s);
        let n = states.len();
        let mut best = vec![f64::NEG_INFINITY; n];
        let mut counter = vec![0usize; n];
        loop {
            let mut a = DMatrix::<f64>::identity(n, n);
            let mut b = DVector::<f64>::zeros(n);
            for (r, c) in counter.iter().enumerate() {
                let e = choices[r][*c];
                b[r] = -e.cost + (1.0 - e.success_prob) * g.gamma * (-g.c_fail);
                match pos(e.to) {
                    Some(col) => a[(r, col)] -= e.success_prob * g.gamma,
                    None if e.to.kind == SymbolKind::FailSink => {
                        b[r] += e.success_prob * g.gamma * (-g.c_fail)
                    }
                    None => {}
                }
            }
            let v = a.lu().solve(&b).expect("gamma < 1 keeps the system regular");
            for i in 0..n {
                best[i] = best[i].max(v[i]);
            }
            // odometer increment
            let mut r = 0;
            loop {
                if r == n {
                    let mut out: BTreeMap<SymbolId, f64> =
                        states.iter().copied().zip(best.iter().copied()).collect();
                    out.insert(SymbolId::GOAL, 0.0);
                    out.insert(SymbolId::FAIL, -g.c_fail);
                    return out;
                }
                counter[r] += 1;
                if counter[r] < choices[r].len() {
                    break;
                }
                counter[r] = 0;
                r += 1;
            }
        }
    }

    #[test]
    fn matches_policy_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..150 {
            let g = random_graph(&mut rng, 0.95);
            assert!(g.symbols.len() <= 8);
            let vi = value_iteration(&g, 1e-11, 100_000).unwrap();
            let oracle = brute_force_values(&g);
            for (s, want) in &oracle {
                assert_abs_diff_eq!(vi.get(*s), *want, epsilon = 1e-6);
            }
            // the greedy policy attains the oracle value too
            let pi = extract_policy(&g, &vi).unwrap();
            for (s, choice) in &pi {
                let e = &choice.edge;
                let q = -e.cost + e.success_prob * g.gamma * oracle[&e.to]
                    + (1.0 - e.success_prob) * g.gamma * (-g.c_fail);
                assert_abs_diff_eq!(q, oracle[s], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn residuals_contract_by_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let g = random_graph(&mut rng, 0.9);
            let (_, res) = value_iteration_traced(&g, 1e-10, 10_000).unwrap();
            for w in res.windows(2) {
                if w[0] > 1e-12 {
                    assert!(w[1] <= 0.9 * w[0] + 1e-12, "{} -> {}", w[0], w[1]);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn mode_value_monotone_in_q(
            q in proptest::collection::vec(0.0f64..1.0, 4),
            bump in 0.0f64..1.0,
            j in 0usize..4,
            v in proptest::collection::vec(-9.0f64..0.0, 4),
        ) {
            let c_fail = 10.0;
            let base = failure_mode_value(&q, &v, c_fail).unwrap();
            let mut q2 = q.clone();
            q2[j] = (q2[j] + bump).min(1.0);
            prop_assert!(failure_mode_value(&q2, &v, c_fail).unwrap() >= base - 1e-12);
        }

        #[test]
        fn failure_value_bounded(
            rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 1..5),
            v in proptest::collection::vec(-9.0f64..0.0, 3),
            sizes in proptest::collection::vec(0.1f64..5.0, 5),
        ) {
            let c_fail = 10.0;
            let vals: Vec<f64> = rows.iter().map(|q| failure_mode_value(q, &v, c_fail).unwrap()).collect();
            let fv = failure_value(&vals, &sizes[..vals.len()]).unwrap();
            let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fv >= -c_fail - 1e-12 && fv <= vmax + 1e-12);
        }
    }
}
