//! Radial network model: tree topology, impedances, load scenarios, and the
//! network file format.
//!
//! Buses are numbered `0..=n` with bus 0 as the slack (substation) bus. Every
//! non-root bus has exactly one parent line, so edges are keyed by their child
//! bus id: all per-edge vectors in this crate use that canonical ordering
//! (ascending child id, offset by one).
//!
//! Lines are series impedances only: shunt admittances, transformer taps,
//! meshed topologies and multi-phase detail are out of scope. Real feeder
//! data carrying shunts (e.g. converted MATPOWER cases) loses them here.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod matpower;

/// Bus index in `0..=n`; 0 is always the slack bus.
pub type BusId = usize;

/// Tolerance absorbing roundoff when classifying flow directions.
pub const FLOW_SIGN_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("malformed network file: {0}")]
    MalformedFile(String),
    #[error("network is not a tree rooted at bus 0: {0}")]
    NotATree(String),
    #[error("bus {0} has more than one parent line")]
    DuplicateParent(BusId),
    #[error("bad impedance on line {parent}->{child}: r={r}, x={x}")]
    BadImpedance {
        parent: BusId,
        child: BusId,
        r: f64,
        x: f64,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// A distribution line from `parent` to `child` with series impedance `r + jx`
/// in per-unit. Zero-impedance lines (`r = x = 0`) are rejected at
/// construction: they make the stability-index diagonal terms degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub parent: BusId,
    pub child: BusId,
    pub r: f64,
    pub x: f64,
}

/// A validated radial network: a directed tree rooted at bus 0 with `n` PQ
/// buses. Immutable after construction; cheap to share across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTree {
    /// Lines indexed by `child - 1` (canonical edge order).
    lines: Vec<Line>,
    /// `parent[j]` for buses `1..=n`; `parent[0]` is unused and set to 0.
    parent: Vec<BusId>,
    /// Children of each bus, ascending.
    children: Vec<Vec<BusId>>,
    /// Bus ids in breadth-first root-to-leaf order, starting with 0.
    order: Vec<BusId>,
}

impl NetworkTree {
    /// Build and validate a tree from its line list.
    pub fn new(lines: Vec<Line>) -> Result<Self, GridError> {
        let n = lines.len();
        if n == 0 {
            return Err(GridError::MalformedFile("no lines".into()));
        }
        for line in &lines {
            if line.child == 0 {
                return Err(GridError::MalformedFile(
                    "a line may not end at the slack bus".into(),
                ));
            }
            if line.child > n || line.parent > n {
                return Err(GridError::MalformedFile(format!(
                    "bus ids must be contiguous 0..={n}, got line {}->{}",
                    line.parent, line.child
                )));
            }
        }

        // Cycle check on the raw multigraph, before asserting unique parents,
        // so that a cyclic file reports NotATree.
        let mut raw_children = vec![Vec::new(); n + 1];
        for line in &lines {
            raw_children[line.parent].push(line.child);
        }
        let mut color = vec![0u8; n + 1]; // 0 = white, 1 = on stack, 2 = done
        let mut reached = 0usize;
        for start in 0..=n {
            if color[start] != 0 {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            color[start] = 1;
            if start == 0 {
                reached += 1;
            }
            while let Some(&mut (bus, ref mut next)) = stack.last_mut() {
                if *next < raw_children[bus].len() {
                    let child = raw_children[bus][*next];
                    *next += 1;
                    match color[child] {
                        0 => {
                            color[child] = 1;
                            if start == 0 {
                                reached += 1;
                            }
                            stack.push((child, 0));
                        }
                        1 => return Err(GridError::NotATree(format!("cycle through bus {child}"))),
                        _ => {}
                    }
                } else {
                    color[bus] = 2;
                    stack.pop();
                }
            }
        }

        let mut by_child: Vec<Option<Line>> = vec![None; n + 1];
        for line in &lines {
            if by_child[line.child].replace(*line).is_some() {
                return Err(GridError::DuplicateParent(line.child));
            }
        }
        if reached != n + 1 {
            return Err(GridError::NotATree(format!(
                "{} of {} buses unreachable from the root",
                n + 1 - reached,
                n + 1
            )));
        }
        let lines: Vec<Line> = (1..=n).map(|j| by_child[j].unwrap()).collect();

        for line in &lines {
            if !(line.r.is_finite() && line.x.is_finite())
                || line.r < 0.0
                || line.x < 0.0
                || (line.r == 0.0 && line.x == 0.0)
            {
                return Err(GridError::BadImpedance {
                    parent: line.parent,
                    child: line.child,
                    r: line.r,
                    x: line.x,
                });
            }
        }

        let mut parent = vec![0usize; n + 1];
        let mut children = vec![Vec::new(); n + 1];
        for line in &lines {
            parent[line.child] = line.parent;
            children[line.parent].push(line.child);
        }
        for list in &mut children {
            list.sort_unstable();
        }

        let mut order = Vec::with_capacity(n + 1);
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(bus) = queue.pop_front() {
            order.push(bus);
            queue.extend(children[bus].iter().copied());
        }

        Ok(Self {
            lines,
            parent,
            children,
            order,
        })
    }

    /// Number of PQ buses (= number of lines).
    pub fn pq_count(&self) -> usize {
        self.lines.len()
    }

    /// Total number of buses including the slack.
    pub fn bus_count(&self) -> usize {
        self.lines.len() + 1
    }

    /// The line feeding bus `j` (`1..=n`).
    pub fn line(&self, j: BusId) -> &Line {
        &self.lines[j - 1]
    }

    /// Lines in canonical edge order (indexed by `child - 1`).
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn parent(&self, j: BusId) -> BusId {
        self.parent[j]
    }

    pub fn children(&self, i: BusId) -> &[BusId] {
        &self.children[i]
    }

    /// Buses in breadth-first root-to-leaf order (starts with bus 0).
    pub fn root_to_leaf(&self) -> &[BusId] {
        &self.order
    }
}

/// The parameters of a power-flow problem: squared slack voltage plus nodal
/// active/reactive demands (load minus generation, so entries may be
/// negative). Indexed by `bus - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadScenario {
    pub v0: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl LoadScenario {
    pub fn new(v0: f64, p: Vec<f64>, q: Vec<f64>) -> Self {
        Self { v0, p, q }
    }

    /// All-zero demands at nominal slack voltage.
    pub fn flat(n: usize) -> Self {
        Self::new(1.0, vec![0.0; n], vec![0.0; n])
    }

    pub fn check_dims(&self, tree: &NetworkTree) -> Result<(), GridError> {
        let n = tree.pq_count();
        if self.p.len() != n || self.q.len() != n {
            return Err(GridError::DimensionMismatch(format!(
                "scenario has {}/{} demands for {} PQ buses",
                self.p.len(),
                self.q.len(),
                n
            )));
        }
        if !(self.v0 > 0.0) {
            return Err(GridError::DimensionMismatch(format!(
                "slack voltage squared must be positive, got {}",
                self.v0
            )));
        }
        Ok(())
    }

    /// Demands scaled along a ray: `base + lambda * direction`.
    pub fn along_ray(&self, direction: &ScenarioDirection, lambda: f64) -> Self {
        Self {
            v0: self.v0,
            p: self
                .p
                .iter()
                .zip(&direction.dp)
                .map(|(b, d)| b + lambda * d)
                .collect(),
            q: self
                .q
                .iter()
                .zip(&direction.dq)
                .map(|(b, d)| b + lambda * d)
                .collect(),
        }
    }
}

/// A demand-space ray used by the continuation to scale loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDirection {
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
}

impl ScenarioDirection {
    /// The uniform-scaling ray through a base scenario.
    pub fn uniform(base: &LoadScenario) -> Self {
        Self {
            dp: base.p.clone(),
            dq: base.q.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.dp.iter().chain(&self.dq).all(|&d| d == 0.0)
    }
}

/// Cumulative series impedance from the root to each bus. Entry 0 is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PathImpedance {
    pub r_to_root: Vec<f64>,
    pub x_to_root: Vec<f64>,
}

impl PathImpedance {
    pub fn r(&self, bus: BusId) -> f64 {
        self.r_to_root[bus]
    }

    pub fn x(&self, bus: BusId) -> f64 {
        self.x_to_root[bus]
    }
}

/// Root-to-leaf accumulation of line impedances, O(n).
pub fn path_impedances(tree: &NetworkTree) -> PathImpedance {
    let n = tree.pq_count();
    let mut r = vec![0.0; n + 1];
    let mut x = vec![0.0; n + 1];
    for &bus in tree.root_to_leaf().iter().skip(1) {
        let line = tree.line(bus);
        r[bus] = r[line.parent] + line.r;
        x[bus] = x[line.parent] + line.x;
    }
    PathImpedance {
        r_to_root: r,
        x_to_root: x,
    }
}

/// Edge-selection matrices of the tree: `pi` has a 1 in column `j` at the
/// parent row of edge `j`, `delta` has a 1 at the child row, and
/// `a = delta - pi` is the signed incidence matrix (each column sums to 0).
pub fn incidence_matrices(tree: &NetworkTree) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = tree.pq_count();
    let mut pi = DMatrix::zeros(n + 1, n);
    let mut delta = DMatrix::zeros(n + 1, n);
    for j in 1..=n {
        pi[(tree.parent(j), j - 1)] = 1.0;
        delta[(j, j - 1)] = 1.0;
    }
    let a = &delta - &pi;
    (pi, delta, a)
}

/// Per-edge flow-direction flags for the mono-directional flow assumption.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneFlowReport {
    /// Flags indexed by `child - 1`: true iff the active flow on that edge is
    /// nonnegative (within [`FLOW_SIGN_TOL`]).
    pub p_nonneg: Vec<bool>,
    pub q_nonneg: Vec<bool>,
    pub all_nonnegative: bool,
}

/// Check that every line carries nonnegative active and reactive power toward
/// the leaves. Reverse flows (distributed generation) flip the flags.
pub fn check_monotone_flows(
    tree: &NetworkTree,
    p_flow: &[f64],
    q_flow: &[f64],
) -> Result<MonotoneFlowReport, GridError> {
    let n = tree.pq_count();
    if p_flow.len() != n || q_flow.len() != n {
        return Err(GridError::DimensionMismatch(format!(
            "flow vectors of length {}/{} for {} edges",
            p_flow.len(),
            q_flow.len(),
            n
        )));
    }
    let p_nonneg: Vec<bool> = p_flow.iter().map(|&p| p >= -FLOW_SIGN_TOL).collect();
    let q_nonneg: Vec<bool> = q_flow.iter().map(|&q| q >= -FLOW_SIGN_TOL).collect();
    let all_nonnegative = p_nonneg.iter().chain(&q_nonneg).all(|&ok| ok);
    Ok(MonotoneFlowReport {
        p_nonneg,
        q_nonneg,
        all_nonnegative,
    })
}

/// A network file: topology plus the base load scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkFile {
    pub tree: NetworkTree,
    pub scenario: LoadScenario,
}

#[derive(Serialize, Deserialize)]
struct BusEntry {
    id: BusId,
    #[serde(default)]
    p: f64,
    #[serde(default)]
    q: f64,
}

#[derive(Serialize, Deserialize)]
struct NetworkJson {
    #[serde(default = "default_v0")]
    v0: f64,
    #[serde(default)]
    buses: Vec<BusEntry>,
    lines: Vec<Line>,
}

fn default_v0() -> f64 {
    1.0
}

/// Parse topology and base loads from the JSON network format.
pub fn parse_network_file(text: &str) -> Result<NetworkFile, GridError> {
    let raw: NetworkJson =
        serde_json::from_str(text).map_err(|e| GridError::MalformedFile(e.to_string()))?;
    let tree = NetworkTree::new(raw.lines)?;
    let n = tree.pq_count();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for bus in &raw.buses {
        if bus.id > n {
            return Err(GridError::MalformedFile(format!(
                "bus entry {} outside 0..={n}",
                bus.id
            )));
        }
        if bus.id == 0 {
            // The slack bus carries no demand entry; tolerate a zero record.
            if bus.p != 0.0 || bus.q != 0.0 {
                return Err(GridError::MalformedFile(
                    "bus 0 cannot carry a demand".into(),
                ));
            }
            continue;
        }
        p[bus.id - 1] = bus.p;
        q[bus.id - 1] = bus.q;
    }
    if !(raw.v0 > 0.0) || !raw.v0.is_finite() {
        return Err(GridError::MalformedFile(format!(
            "v0 must be a positive squared voltage, got {}",
            raw.v0
        )));
    }
    let scenario = LoadScenario::new(raw.v0, p, q);
    Ok(NetworkFile { tree, scenario })
}

/// Parse only the topology from the JSON network format.
pub fn parse_network(text: &str) -> Result<NetworkTree, GridError> {
    Ok(parse_network_file(text)?.tree)
}

/// Serialize a network (topology + base loads) back to the JSON format.
/// Round-trips exactly through [`parse_network_file`].
pub fn emit_network(file: &NetworkFile) -> String {
    let buses: Vec<BusEntry> = (1..=file.tree.pq_count())
        .map(|j| BusEntry {
            id: j,
            p: file.scenario.p[j - 1],
            q: file.scenario.q[j - 1],
        })
        .collect();
    let raw = NetworkJson {
        v0: file.scenario.v0,
        buses,
        lines: file.tree.lines().to_vec(),
    };
    serde_json::to_string_pretty(&raw).expect("network serialization cannot fail")
}
