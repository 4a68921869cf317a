//! Distributed and hierarchical computation of the approximate index.
//!
//! The approximate index is an arithmetic mean of per-bus terms, so it can be
//! computed without a central unit: every sensor starts from its own term and
//! runs synchronous average-consensus rounds with Metropolis weights, or the
//! terms are folded bottom-up over a recursive partition of the buses (one
//! operator per sub-grid).

use crate::grid::{BusId, NetworkTree};
use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("invalid communication graph: {0}")]
    InvalidGraph(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
}

/// Undirected communication graph over the sensor nodes (buses `1..=n`,
/// stored 0-based). No self-loops; parallel edges are collapsed.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    /// Sorted neighbor lists, one per node.
    neighbors: Vec<Vec<usize>>,
}

impl CommGraph {
    /// Build from an undirected edge list over nodes `0..n`.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self, ConsensusError> {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(ConsensusError::InvalidGraph(format!(
                    "edge ({a}, {b}) outside 0..{n}"
                )));
            }
            if a == b {
                return Err(ConsensusError::InvalidGraph(format!("self-loop at {a}")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { neighbors })
    }

    /// The electrical tree restricted to the non-root buses: a link wherever
    /// two PQ buses share a line. Disconnected when the root has several
    /// children, since the slack bus carries no sensor.
    pub fn from_tree(tree: &NetworkTree) -> Self {
        let n = tree.pq_count();
        let mut edges = Vec::new();
        for j in 1..=n {
            let parent = tree.parent(j);
            if parent >= 1 {
                edges.push((parent - 1, j - 1));
            }
        }
        Self::new(n, &edges).expect("tree links are always valid")
    }

    pub fn complete(n: usize) -> Self {
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                edges.push((a, b));
            }
        }
        Self::new(n, &edges).expect("complete graph is valid")
    }

    pub fn ring(n: usize) -> Self {
        let edges: Vec<_> = (0..n).map(|a| (a, (a + 1) % n)).collect();
        Self::new(n, if n > 1 { &edges } else { &[] }).expect("ring is valid")
    }

    /// A random spanning tree plus `extra_edges` random chords.
    pub fn random_connected(n: usize, extra_edges: usize, rng: &mut impl Rng) -> Self {
        let mut edges = Vec::new();
        for node in 1..n {
            edges.push((rng.random_range(0..node), node));
        }
        for _ in 0..extra_edges {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                edges.push((a.min(b), a.max(b)));
            }
        }
        Self::new(n, &edges).expect("generated edges are valid")
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn is_connected(&self) -> bool {
        let n = self.neighbors.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(node) = stack.pop() {
            for &next in &self.neighbors[node] {
                if !seen[next] {
                    seen[next] = true;
                    count += 1;
                    stack.push(next);
                }
            }
        }
        count == n
    }

    /// Union of several graphs over the same node set.
    pub fn union(graphs: &[CommGraph]) -> Result<Self, ConsensusError> {
        let n = graphs
            .first()
            .map(CommGraph::node_count)
            .unwrap_or_default();
        let mut edges = Vec::new();
        for g in graphs {
            if g.node_count() != n {
                return Err(ConsensusError::InvalidGraph(
                    "schedule graphs differ in node count".into(),
                ));
            }
            for a in 0..n {
                for &b in &g.neighbors[a] {
                    if a < b {
                        edges.push((a, b));
                    }
                }
            }
        }
        Self::new(n, &edges)
    }
}

/// Metropolis weight matrix: `w_jk = 1 / (1 + max(d_j, d_k))` on links,
/// self-weights absorbing the remainder. Symmetric and doubly stochastic,
/// so the state mean is invariant round to round.
pub fn metropolis_weights(graph: &CommGraph) -> DMatrix<f64> {
    let n = graph.node_count();
    let mut w = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut remainder = 1.0;
        for &k in graph.neighbors(j) {
            let weight = 1.0 / (1.0 + graph.degree(j).max(graph.degree(k)) as f64);
            w[(j, k)] = weight;
            remainder -= weight;
        }
        w[(j, j)] = remainder;
    }
    w
}

/// Communication topology per round: fixed, or cycling through a sequence.
#[derive(Debug, Clone)]
pub enum ConsensusSchedule {
    Static(CommGraph),
    Cycling(Vec<CommGraph>),
}

impl ConsensusSchedule {
    fn graph(&self, round: usize) -> &CommGraph {
        match self {
            ConsensusSchedule::Static(g) => g,
            ConsensusSchedule::Cycling(graphs) => &graphs[round % graphs.len()],
        }
    }

    fn union_connected(&self) -> bool {
        match self {
            ConsensusSchedule::Static(g) => g.is_connected(),
            ConsensusSchedule::Cycling(graphs) => CommGraph::union(graphs)
                .map(|g| g.is_connected())
                .unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConsensusOptions {
    /// Stop once `max - min` of the node states falls to this spread.
    pub tol: f64,
    pub max_rounds: usize,
    /// Keep the full per-round state history (the trace CSV needs it; long
    /// runs may prefer spread-only recording).
    pub record_states: bool,
}

impl Default for ConsensusOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_rounds: 100_000,
            record_states: true,
        }
    }
}

/// Trace of a synchronous consensus run. `rounds` holds the recorded states
/// (always including round 0 and the final round), `spread` one entry per
/// executed round including round 0.
#[derive(Debug, Clone, Serialize)]
pub struct ConsensusTrace {
    pub rounds: Vec<Vec<f64>>,
    pub spread: Vec<f64>,
    pub converged_round: Option<usize>,
    /// Whether the schedule can reach consensus at all: connectivity of the
    /// static graph, or of the union over one schedule period.
    pub connected: bool,
    pub final_state: Vec<f64>,
}

fn spread_of(state: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in state {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if state.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Run synchronous consensus rounds: every node replaces its value by the
/// Metropolis-weighted average over itself and its neighbors, with weights
/// recomputed from the current round's graph. Disconnected schedules are
/// still simulated; they simply never converge.
pub fn run_consensus(
    schedule: &ConsensusSchedule,
    initial: &[f64],
    opts: &ConsensusOptions,
) -> Result<ConsensusTrace, ConsensusError> {
    let n = initial.len();
    let check = |g: &CommGraph| {
        if g.node_count() != n {
            return Err(ConsensusError::InvalidGraph(format!(
                "graph has {} nodes for {} initial values",
                g.node_count(),
                n
            )));
        }
        Ok(())
    };
    match schedule {
        ConsensusSchedule::Static(g) => check(g)?,
        ConsensusSchedule::Cycling(graphs) => {
            if graphs.is_empty() {
                return Err(ConsensusError::InvalidGraph("empty schedule".into()));
            }
            for g in graphs {
                check(g)?;
            }
        }
    }

    let connected = schedule.union_connected();
    let mut state = initial.to_vec();
    let mut rounds = vec![state.clone()];
    let mut spread = Vec::new();
    spread.push(spread_of(&state));
    let mut converged_round = (spread[0] <= opts.tol).then_some(0);

    let mut round = 0;
    while converged_round.is_none() && round < opts.max_rounds {
        let graph = schedule.graph(round);
        round += 1;
        let mut next = vec![0.0; n];
        for j in 0..n {
            let dj = graph.degree(j);
            let mut value = state[j];
            for &k in graph.neighbors(j) {
                let w = 1.0 / (1.0 + dj.max(graph.degree(k)) as f64);
                value += w * (state[k] - state[j]);
            }
            next[j] = value;
        }
        state = next;
        if opts.record_states {
            rounds.push(state.clone());
        }
        let s = spread_of(&state);
        spread.push(s);
        if s <= opts.tol {
            converged_round = Some(round);
        }
    }
    if !opts.record_states && rounds.len() == 1 && spread.len() > 1 {
        rounds.push(state.clone());
    }

    Ok(ConsensusTrace {
        rounds,
        spread,
        converged_round,
        connected,
        final_state: state,
    })
}

/// A recursive partition of the monitored buses: leaves are single buses,
/// internal nodes are sub-grids whose operators fold child aggregates.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionNode {
    Leaf(BusId),
    Internal(Vec<PartitionNode>),
}

impl PartitionNode {
    /// Parse the nested-array JSON form: an integer is a leaf bus, an array
    /// is a sub-grid.
    pub fn from_json(value: &serde_json::Value) -> Result<Self, ConsensusError> {
        match value {
            serde_json::Value::Number(num) => num
                .as_u64()
                .map(|b| PartitionNode::Leaf(b as BusId))
                .ok_or_else(|| ConsensusError::InvalidPartition(format!("bad bus id {num}"))),
            serde_json::Value::Array(items) => {
                if items.is_empty() {
                    return Err(ConsensusError::InvalidPartition(
                        "empty sub-partition".into(),
                    ));
                }
                let children = items
                    .iter()
                    .map(PartitionNode::from_json)
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(PartitionNode::Internal(children))
            }
            other => Err(ConsensusError::InvalidPartition(format!(
                "expected bus id or array, got {other}"
            ))),
        }
    }

    /// Uniformly random partition tree over the given buses.
    pub fn random(buses: &[BusId], rng: &mut impl Rng) -> Self {
        if buses.len() == 1 {
            return PartitionNode::Leaf(buses[0]);
        }
        let mut shuffled = buses.to_vec();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let groups = rng.random_range(2..=shuffled.len().min(4));
        let mut children = Vec::new();
        let chunk = shuffled.len().div_ceil(groups);
        for part in shuffled.chunks(chunk) {
            children.push(PartitionNode::random(part, rng));
        }
        PartitionNode::Internal(children)
    }
}

/// Aggregate of one partition node: bus count and summed terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub n_total: usize,
    pub h_total: f64,
    pub avsi: f64,
}

/// Fold per-bus terms over a partition tree by post-order traversal. The
/// leaves must be exactly the buses `1..=h.len()`, each once; the result
/// equals the centralized mean (same additions, different order).
pub fn hierarchical_aggregate(
    root: &PartitionNode,
    h: &[f64],
) -> Result<Aggregate, ConsensusError> {
    let n = h.len();
    let mut seen = vec![false; n + 1];
    let (count, total) = fold(root, h, &mut seen)?;
    if count != n {
        let missing: Vec<BusId> = (1..=n).filter(|&j| !seen[j]).collect();
        return Err(ConsensusError::InvalidPartition(format!(
            "buses missing from partition: {missing:?}"
        )));
    }
    Ok(Aggregate {
        n_total: count,
        h_total: total,
        avsi: total / count as f64,
    })
}

fn fold(
    node: &PartitionNode,
    h: &[f64],
    seen: &mut [bool],
) -> Result<(usize, f64), ConsensusError> {
    match node {
        PartitionNode::Leaf(bus) => {
            let j = *bus;
            if j == 0 || j > h.len() {
                return Err(ConsensusError::InvalidPartition(format!(
                    "bus {j} outside 1..={}",
                    h.len()
                )));
            }
            if seen[j] {
                return Err(ConsensusError::InvalidPartition(format!(
                    "bus {j} appears twice"
                )));
            }
            seen[j] = true;
            Ok((1, h[j - 1]))
        }
        PartitionNode::Internal(children) => {
            let mut count = 0;
            let mut total = 0.0;
            for child in children {
                let (c, t) = fold(child, h, seen)?;
                count += c;
                total += t;
            }
            Ok((count, total))
        }
    }
}
