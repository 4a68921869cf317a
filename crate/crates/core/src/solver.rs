//! Branch-flow power-flow solver for radial networks.
//!
//! The state of the grid is described per edge by the sending-end active and
//! reactive flows and the squared current magnitude, plus squared voltage
//! magnitudes per bus and the slack injection. The solver is a
//! backward/forward sweep: flows accumulate leaf-to-root with the current
//! loss estimates, voltages propagate root-to-leaf, and squared currents are
//! refreshed from `v * l = p^2 + q^2` at the sending end. Convergence failure
//! doubles as the feasibility test used by the loadability continuation.

use crate::grid::{GridError, LoadScenario, NetworkTree, ScenarioDirection};
use crate::index::IndexReport;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("power flow did not converge after {iterations} sweeps")]
    NotConverged { iterations: usize },
    #[error("base scenario is infeasible")]
    BaseInfeasible,
    #[error("continuation direction is identically zero")]
    DegenerateDirection,
    #[error("no loadability limit found along the ray")]
    NoLoadabilityLimit,
}

impl From<GridError> for SolveError {
    fn from(e: GridError) -> Self {
        SolveError::DimensionMismatch(e.to_string())
    }
}

/// A grid state in branch-flow variables. Per-edge vectors are indexed by
/// `child - 1`; `voltage_sq` has one entry per bus (entry 0 is the slack).
/// `p_slack`/`q_slack` are the injections into the feeder at bus 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    pub current_sq: Vec<f64>,
    pub voltage_sq: Vec<f64>,
    pub p_slack: f64,
    pub q_slack: f64,
}

impl OperatingPoint {
    /// The flat state: nominal voltages, no flows.
    pub fn flat(tree: &NetworkTree, scenario: &LoadScenario) -> Self {
        let n = tree.pq_count();
        Self {
            p_flow: vec![0.0; n],
            q_flow: vec![0.0; n],
            current_sq: vec![0.0; n],
            voltage_sq: vec![scenario.v0; n + 1],
            p_slack: 0.0,
            q_slack: 0.0,
        }
    }

    pub fn check_dims(&self, tree: &NetworkTree) -> Result<(), SolveError> {
        let n = tree.pq_count();
        if self.p_flow.len() != n
            || self.q_flow.len() != n
            || self.current_sq.len() != n
            || self.voltage_sq.len() != n + 1
        {
            return Err(SolveError::DimensionMismatch(format!(
                "operating point does not match a network with {n} PQ buses"
            )));
        }
        Ok(())
    }

    /// Pack into the canonical state vector
    /// `[p_flow, q_flow, current_sq, v_1..v_n, p_0, q_0]` of length `4n + 2`.
    /// The last two slots hold the net demand at the root, i.e. the negated
    /// slack injections.
    pub fn pack_state(&self) -> Vec<f64> {
        let n = self.p_flow.len();
        let mut u = Vec::with_capacity(4 * n + 2);
        u.extend_from_slice(&self.p_flow);
        u.extend_from_slice(&self.q_flow);
        u.extend_from_slice(&self.current_sq);
        u.extend_from_slice(&self.voltage_sq[1..]);
        u.push(-self.p_slack);
        u.push(-self.q_slack);
        u
    }

    /// Inverse of [`pack_state`](Self::pack_state); `v0` fills slot 0 of the
    /// voltage vector.
    pub fn unpack_state(u: &[f64], v0: f64) -> Self {
        let n = (u.len() - 2) / 4;
        assert_eq!(u.len(), 4 * n + 2, "state vector length must be 4n + 2");
        let mut voltage_sq = Vec::with_capacity(n + 1);
        voltage_sq.push(v0);
        voltage_sq.extend_from_slice(&u[3 * n..4 * n]);
        Self {
            p_flow: u[..n].to_vec(),
            q_flow: u[n..2 * n].to_vec(),
            current_sq: u[2 * n..3 * n].to_vec(),
            voltage_sq,
            p_slack: -u[4 * n],
            q_slack: -u[4 * n + 1],
        }
    }

    /// Flow-direction flags of this state (the mono-directional assumption
    /// behind the error bounds).
    pub fn monotone_flows(
        &self,
        tree: &NetworkTree,
    ) -> Result<crate::grid::MonotoneFlowReport, GridError> {
        crate::grid::check_monotone_flows(tree, &self.p_flow, &self.q_flow)
    }
}

/// Result of a power-flow solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub op: OperatingPoint,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Convergence threshold on both the max voltage change per sweep and the
    /// max-norm of the branch-flow residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction of the squared-current update applied per sweep.
    pub damping: f64,
    /// Geometric extrapolation of the sweep iteration; rescues the slow
    /// convergence close to the loadability limit.
    pub extrapolate: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            damping: 1.0,
            extrapolate: true,
        }
    }
}

/// Solver settings used by the continuation feasibility probe: a larger sweep
/// budget so that points within `tol_lambda` of the nose still resolve.
pub const CONTINUATION_SOLVER_OPTIONS: SolverOptions = SolverOptions {
    tol: 1e-10,
    max_iter: 2000,
    damping: 1.0,
    extrapolate: true,
};

/// Evaluate the branch-flow residual of an operating point, stacked as
/// `[active balance (n+1), reactive balance (n+1), voltage drop (n),
/// current definition (n)]` in canonical edge order.
///
/// The residual is oriented so that its Jacobian with respect to the packed
/// state is exactly the matrix assembled by
/// [`build_full_jacobian`](crate::jacobian::build_full_jacobian).
pub fn bfm_residual(
    tree: &NetworkTree,
    scenario: &LoadScenario,
    op: &OperatingPoint,
) -> Result<Vec<f64>, SolveError> {
    scenario.check_dims(tree)?;
    op.check_dims(tree)?;
    Ok(bfm_residual_state(tree, scenario, &op.pack_state()))
}

/// Residual evaluated directly on a packed state vector (used by the
/// finite-difference Jacobian check).
pub fn bfm_residual_state(tree: &NetworkTree, scenario: &LoadScenario, u: &[f64]) -> Vec<f64> {
    let n = tree.pq_count();
    assert_eq!(u.len(), 4 * n + 2, "state vector length must be 4n + 2");
    let (p_flow, rest) = u.split_at(n);
    let (q_flow, rest) = rest.split_at(n);
    let (current_sq, rest) = rest.split_at(n);
    let (v_pq, slack) = rest.split_at(n);
    let v = |bus: usize| {
        if bus == 0 {
            scenario.v0
        } else {
            v_pq[bus - 1]
        }
    };

    let mut residual = vec![0.0; 4 * n + 2];
    // Active and reactive nodal balance, rows 0..=n and n+1..=2n+1.
    for i in 0..=n {
        let (mut p_bal, mut q_bal) = if i == 0 {
            // Root row: the state carries the net demand at the root.
            (-slack[0], -slack[1])
        } else {
            let line = tree.line(i);
            (
                p_flow[i - 1] - line.r * current_sq[i - 1] - scenario.p[i - 1],
                q_flow[i - 1] - line.x * current_sq[i - 1] - scenario.q[i - 1],
            )
        };
        for &k in tree.children(i) {
            p_bal -= p_flow[k - 1];
            q_bal -= q_flow[k - 1];
        }
        residual[i] = p_bal;
        residual[n + 1 + i] = q_bal;
    }
    // Voltage drop and current definition, rows 2n+2.. and 3n+2.. .
    for j in 1..=n {
        let line = tree.line(j);
        let vi = v(line.parent);
        residual[2 * n + 1 + j] =
            vi - v(j) - 2.0 * (line.r * p_flow[j - 1] + line.x * q_flow[j - 1])
                + (line.r * line.r + line.x * line.x) * current_sq[j - 1];
        residual[3 * n + 1 + j] =
            p_flow[j - 1] * p_flow[j - 1] + q_flow[j - 1] * q_flow[j - 1] - vi * current_sq[j - 1];
    }
    residual
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, &v| acc.max(v.abs()))
}

/// One backward/forward sweep given the squared-current estimate. Returns
/// `None` when a squared voltage drops to zero or below (infeasible side).
struct SweepResult {
    p_flow: Vec<f64>,
    q_flow: Vec<f64>,
    voltage_sq: Vec<f64>,
    next_current_sq: Vec<f64>,
}

fn sweep_once(
    tree: &NetworkTree,
    scenario: &LoadScenario,
    current_sq: &[f64],
) -> Option<SweepResult> {
    let n = tree.pq_count();
    let order = tree.root_to_leaf();
    let mut p_flow = vec![0.0; n];
    let mut q_flow = vec![0.0; n];
    for &bus in order.iter().rev() {
        if bus == 0 {
            continue;
        }
        let line = tree.line(bus);
        let mut p = scenario.p[bus - 1] + line.r * current_sq[bus - 1];
        let mut q = scenario.q[bus - 1] + line.x * current_sq[bus - 1];
        for &k in tree.children(bus) {
            p += p_flow[k - 1];
            q += q_flow[k - 1];
        }
        p_flow[bus - 1] = p;
        q_flow[bus - 1] = q;
    }

    let mut voltage_sq = vec![scenario.v0; n + 1];
    for &bus in order.iter().skip(1) {
        let line = tree.line(bus);
        let v = voltage_sq[line.parent]
            - 2.0 * (line.r * p_flow[bus - 1] + line.x * q_flow[bus - 1])
            + (line.r * line.r + line.x * line.x) * current_sq[bus - 1];
        if !(v > 0.0) {
            return None;
        }
        voltage_sq[bus] = v;
    }

    let mut next_current_sq = vec![0.0; n];
    for j in 1..=n {
        let vi = voltage_sq[tree.parent(j)];
        next_current_sq[j - 1] =
            (p_flow[j - 1] * p_flow[j - 1] + q_flow[j - 1] * q_flow[j - 1]) / vi;
    }
    Some(SweepResult {
        p_flow,
        q_flow,
        voltage_sq,
        next_current_sq,
    })
}

fn assemble_op(tree: &NetworkTree, sweep: &SweepResult, current_sq: Vec<f64>) -> OperatingPoint {
    let mut p_slack = 0.0;
    let mut q_slack = 0.0;
    for &k in tree.children(0) {
        p_slack += sweep.p_flow[k - 1];
        q_slack += sweep.q_flow[k - 1];
    }
    OperatingPoint {
        p_flow: sweep.p_flow.clone(),
        q_flow: sweep.q_flow.clone(),
        current_sq,
        voltage_sq: sweep.voltage_sq.clone(),
        p_slack,
        q_slack,
    }
}

/// Solve the power flow with the default options except for the given
/// tolerance and iteration cap.
pub fn solve_power_flow(
    tree: &NetworkTree,
    scenario: &LoadScenario,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport, SolveError> {
    solve_power_flow_with(
        tree,
        scenario,
        &SolverOptions {
            tol,
            max_iter,
            ..SolverOptions::default()
        },
    )
}

/// Backward/forward sweep iteration on the squared currents.
///
/// Converged means both the max voltage change per sweep and the max-norm of
/// the full branch-flow residual are at most `opts.tol`. A voltage falling to
/// zero or exhausting the sweep budget signals operation outside the solvable
/// region, not a bug.
pub fn solve_power_flow_with(
    tree: &NetworkTree,
    scenario: &LoadScenario,
    opts: &SolverOptions,
) -> Result<SolveReport, SolveError> {
    scenario.check_dims(tree)?;
    let n = tree.pq_count();
    let mut current_sq = vec![0.0; n];
    let mut v_prev = vec![scenario.v0; n + 1];
    let mut delta_prev: Option<Vec<f64>> = None;
    let mut last_rate: Option<f64> = None;
    let mut cooldown = 0usize;
    let fail = |iterations| Err(SolveError::NotConverged { iterations });

    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let Some(sweep) = sweep_once(tree, scenario, &current_sq) else {
            return fail(iterations);
        };
        let delta_v = sweep
            .voltage_sq
            .iter()
            .zip(&v_prev)
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        let delta_ell: Vec<f64> = sweep
            .next_current_sq
            .iter()
            .zip(&current_sq)
            .map(|(a, b)| a - b)
            .collect();

        if delta_v <= opts.tol {
            let op = assemble_op(tree, &sweep, current_sq.clone());
            let residual_norm = max_abs(&bfm_residual_state(tree, scenario, &op.pack_state()));
            if residual_norm <= opts.tol {
                return Ok(SolveReport {
                    op,
                    iterations,
                    residual_norm,
                    converged: true,
                });
            }
        }

        // Geometric extrapolation: near the nose the sweep contracts with a
        // rate approaching 1; once the rate estimate is stable, jump by the
        // remaining geometric series and keep the jump only if it shrinks the
        // update. The probe sweep is reused as the next iterate.
        let mut extrapolated = false;
        if opts.extrapolate && cooldown == 0 {
            if let Some(prev) = &delta_prev {
                let den: f64 = prev.iter().map(|d| d * d).sum();
                if den > 0.0 {
                    let num: f64 = delta_ell.iter().zip(prev).map(|(a, b)| a * b).sum();
                    let rate = num / den;
                    let stable = last_rate
                        .map(|r| (rate - r).abs() <= 0.1 * (1.0 - rate).abs())
                        .unwrap_or(false);
                    last_rate = Some(rate);
                    if stable && (0.5..=0.999_999_9).contains(&rate) {
                        let factor = rate / (1.0 - rate);
                        let guess: Vec<f64> = sweep
                            .next_current_sq
                            .iter()
                            .zip(&delta_ell)
                            .map(|(l, d)| l + factor * d)
                            .collect();
                        if guess.iter().all(|&l| l >= 0.0) {
                            if let Some(probe) = sweep_once(tree, scenario, &guess) {
                                let probe_delta = probe
                                    .next_current_sq
                                    .iter()
                                    .zip(&guess)
                                    .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
                                if probe_delta < max_abs(&delta_ell) {
                                    current_sq = guess;
                                    v_prev = probe.voltage_sq;
                                    delta_prev = None;
                                    last_rate = None;
                                    extrapolated = true;
                                } else {
                                    cooldown = 10;
                                }
                            } else {
                                cooldown = 10;
                            }
                        }
                    }
                }
            } else {
                last_rate = None;
            }
        }
        cooldown = cooldown.saturating_sub(1);
        if extrapolated {
            continue;
        }

        if opts.damping == 1.0 {
            current_sq = sweep.next_current_sq;
            delta_prev = Some(delta_ell);
        } else {
            for (l, d) in current_sq.iter_mut().zip(&delta_ell) {
                *l += opts.damping * d;
            }
            delta_prev = Some(delta_ell.iter().map(|d| d * opts.damping).collect());
        }
        v_prev = sweep.voltage_sq;
    }
    fail(iterations)
}

/// The continuation's feasibility probe: a deterministic solve with the
/// enlarged sweep budget, retried once with halved updates when the plain
/// sweep fails (plain sweeps stall close to the nose point).
pub fn probe_solve(tree: &NetworkTree, scenario: &LoadScenario) -> Result<SolveReport, SolveError> {
    match solve_power_flow_with(tree, scenario, &CONTINUATION_SOLVER_OPTIONS) {
        Ok(report) => Ok(report),
        Err(SolveError::NotConverged { .. }) => solve_power_flow_with(
            tree,
            scenario,
            &SolverOptions {
                damping: 0.5,
                ..CONTINUATION_SOLVER_OPTIONS
            },
        ),
        Err(e) => Err(e),
    }
}

/// One recorded point of a continuation trace.
#[derive(Debug, Clone, Serialize)]
pub struct ContinuationStep {
    pub lambda: f64,
    pub solve: SolveReport,
    pub index: IndexReport,
}

/// Load scalings traced to the loadability limit. `steps` holds every
/// converged probe in strictly increasing `lambda` order; `lambda_star` is
/// the midpoint of the final bracket `(bracket_lo, bracket_hi)`.
#[derive(Debug, Clone, Serialize)]
pub struct ContinuationTrace {
    pub steps: Vec<ContinuationStep>,
    pub lambda_star: f64,
    pub bracket_lo: f64,
    pub bracket_hi: f64,
}

/// Converged probes of a continuation, before index reports are attached.
pub(crate) struct RawTrace {
    pub points: Vec<(f64, SolveReport)>,
    pub lo: f64,
    pub hi: f64,
}

pub(crate) fn trace_feasibility(
    tree: &NetworkTree,
    base: &LoadScenario,
    direction: &ScenarioDirection,
    tol_lambda: f64,
) -> Result<RawTrace, SolveError> {
    if direction.dp.len() != base.p.len() || direction.dq.len() != base.q.len() {
        return Err(SolveError::DimensionMismatch(
            "direction length does not match the scenario".into(),
        ));
    }
    if direction.is_zero() {
        return Err(SolveError::DegenerateDirection);
    }

    let mut points = Vec::new();
    let base_report = probe_solve(tree, base).map_err(|_| SolveError::BaseInfeasible)?;
    points.push((0.0, base_report));

    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    loop {
        let scenario = base.along_ray(direction, hi);
        match probe_solve(tree, &scenario) {
            Ok(report) => {
                points.push((hi, report));
                lo = hi;
                hi *= 2.0;
                doublings += 1;
                if doublings > 200 {
                    return Err(SolveError::NoLoadabilityLimit);
                }
            }
            Err(_) => break,
        }
    }

    while hi - lo > tol_lambda {
        let mid = 0.5 * (lo + hi);
        let scenario = base.along_ray(direction, mid);
        match probe_solve(tree, &scenario) {
            Ok(report) => {
                points.push((mid, report));
                lo = mid;
            }
            Err(_) => hi = mid,
        }
    }

    Ok(RawTrace { points, lo, hi })
}

/// Scale demands along `base + lambda * direction`, doubling `lambda` until
/// the power flow fails and then bisecting the feasibility boundary to width
/// `tol_lambda`. Every converged probe is recorded together with its
/// stability-index report.
pub fn find_loadability_limit(
    tree: &NetworkTree,
    base: &LoadScenario,
    direction: &ScenarioDirection,
    tol_lambda: f64,
) -> Result<ContinuationTrace, SolveError> {
    let raw = trace_feasibility(tree, base, direction, tol_lambda)?;
    let steps = raw
        .points
        .into_iter()
        .map(|(lambda, solve)| {
            let scenario = base.along_ray(direction, lambda);
            let index = crate::index::index_report(tree, &scenario, &solve.op);
            ContinuationStep {
                lambda,
                solve,
                index,
            }
        })
        .collect();
    Ok(ContinuationTrace {
        steps,
        lambda_star: 0.5 * (raw.lo + raw.hi),
        bracket_lo: raw.lo,
        bracket_hi: raw.hi,
    })
}
