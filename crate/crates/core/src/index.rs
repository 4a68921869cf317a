//! Approximate voltage stability index and its error bounds.
//!
//! Each edge contributes a scalar term computable from quantities measured at
//! its child bus (squared voltage and squared line current) plus line
//! parameters and the series impedance back to the root. The mean of the log
//! terms approximates the exact index; under mono-directional flows the
//! approximation error is bracketed by the spectral radius of the scaled
//! off-diagonal part of the reduced Jacobian.

use crate::grid::{path_impedances, BusId, Line, LoadScenario, NetworkTree, PathImpedance};
use crate::jacobian::{build_reduced_jacobian, log_det, JacobianBundle};
use crate::solver::OperatingPoint;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("diagonal term at bus {bus} is not positive ({value}); approximate collapse signal")]
    NonpositiveDiagTerm { bus: BusId, value: f64 },
    #[error("spectral radius {rho} is not below 1; outside the voltage stability region")]
    RhoOutOfRange { rho: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Slack added when checking the analytic inequalities numerically.
pub const BOUND_SLACK: f64 = 1e-12;

/// Eigenvalue magnitudes at least this fraction of the spectral radius count
/// as "close" when sizing the conjectured tighter bound.
pub const NEAR_RADIUS_FRACTION: f64 = 0.95;

/// Quantities a sensor at bus `j` can measure directly: its own squared
/// voltage magnitude and the squared current on the line feeding it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMeasurement {
    pub voltage_sq: f64,
    pub current_sq: f64,
}

/// Extract the per-bus measurements from a solved operating point.
pub fn measurements_from_op(tree: &NetworkTree, op: &OperatingPoint) -> Vec<LocalMeasurement> {
    (1..=tree.pq_count())
        .map(|j| LocalMeasurement {
            voltage_sq: op.voltage_sq[j],
            current_sq: op.current_sq[j - 1],
        })
        .collect()
}

/// Diagonal entry of the reduced Jacobian for the edge feeding bus `j`,
/// evaluated from the sending-end state:
/// `v_i - 2 p r - 2 q x - 2 l (r rbar_i + x xbar_i)` with `i` the parent.
pub fn diag_term_global(
    tree: &NetworkTree,
    paths: &PathImpedance,
    op: &OperatingPoint,
    j: BusId,
) -> f64 {
    let line = tree.line(j);
    let parent = tree.parent(j);
    op.voltage_sq[parent]
        - 2.0 * op.p_flow[j - 1] * line.r
        - 2.0 * op.q_flow[j - 1] * line.x
        - 2.0 * op.current_sq[j - 1] * (line.r * paths.r(parent) + line.x * paths.x(parent))
}

/// The same diagonal entry rewritten against receiving-end measurements:
/// `v_j - l (r (2 rbar_j - r) + x (2 xbar_j - x))`. Identical to
/// [`diag_term_global`] at any power-flow solution; this form is the
/// production path because it needs only local sensing at bus `j`.
pub fn diag_term_local(line: &Line, paths: &PathImpedance, m: &LocalMeasurement) -> f64 {
    let rbar = paths.r(line.child);
    let xbar = paths.x(line.child);
    m.voltage_sq - m.current_sq * (line.r * (2.0 * rbar - line.r) + line.x * (2.0 * xbar - line.x))
}

/// Log terms `h_j` for all buses from local measurements. Fails on the first
/// bus whose diagonal term has crossed zero (the approximate index declares
/// collapse at that edge).
pub fn bus_log_terms(
    tree: &NetworkTree,
    paths: &PathImpedance,
    measurements: &[LocalMeasurement],
) -> Result<Vec<f64>, IndexError> {
    let n = tree.pq_count();
    if measurements.len() != n {
        return Err(IndexError::DimensionMismatch(format!(
            "{} measurements for {} buses",
            measurements.len(),
            n
        )));
    }
    let mut h = Vec::with_capacity(n);
    for j in 1..=n {
        let term = diag_term_local(tree.line(j), paths, &measurements[j - 1]);
        if !(term > 0.0) {
            return Err(IndexError::NonpositiveDiagTerm {
                bus: j,
                value: term,
            });
        }
        h.push(term.ln());
    }
    Ok(h)
}

/// The approximate index together with its per-bus terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Avsi {
    pub avsi: f64,
    pub h: Vec<f64>,
}

/// Approximate voltage stability index: the arithmetic mean of the per-bus
/// log terms, O(n) end to end.
pub fn avsi(tree: &NetworkTree, op: &OperatingPoint) -> Result<Avsi, IndexError> {
    let paths = path_impedances(tree);
    let measurements = measurements_from_op(tree, op);
    let h = bus_log_terms(tree, &paths, &measurements)?;
    let avsi = h.iter().sum::<f64>() / h.len() as f64;
    Ok(Avsi { avsi, h })
}

/// The scaled off-diagonal iteration matrix `-inv(diag) * off`, nonnegative
/// under mono-directional flows.
fn scaled_off(diag: &DVector<f64>, off: &DMatrix<f64>) -> Result<DMatrix<f64>, IndexError> {
    for (idx, &d) in diag.iter().enumerate() {
        if !(d > 0.0) {
            return Err(IndexError::NonpositiveDiagTerm {
                bus: idx + 1,
                value: d,
            });
        }
    }
    Ok(DMatrix::from_fn(off.nrows(), off.ncols(), |i, j| {
        -off[(i, j)] / diag[i]
    }))
}

/// Power iteration for the spectral radius; `None` when the norm-ratio
/// estimate has not stabilized within the iteration budget.
fn power_iteration(b: &DMatrix<f64>) -> Option<f64> {
    let n = b.nrows();
    if n == 0 {
        return Some(0.0);
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut previous = f64::NAN;
    let mut stable = 0usize;
    for _ in 0..10_000 {
        let w = b * &v;
        let norm = w.norm();
        if norm == 0.0 {
            // Annihilated: the matrix is nilpotent on the start vector.
            return Some(0.0);
        }
        let estimate = norm;
        if (estimate - previous).abs() <= 1e-10 * estimate.max(1e-300) {
            stable += 1;
            if stable >= 3 {
                return Some(estimate);
            }
        } else {
            stable = 0;
        }
        previous = estimate;
        v = w / norm;
    }
    None
}

/// All eigenvalue magnitudes of the scaled off-diagonal matrix.
fn eigen_magnitudes(b: &DMatrix<f64>) -> Vec<f64> {
    b.clone()
        .complex_eigenvalues()
        .iter()
        .map(|ev| ev.norm())
        .collect()
}

/// Spectral radius of the scaled off-diagonal matrix and the number of
/// eigenvalues whose magnitude is close to it. The radius comes from power
/// iteration (with a dense-eigenvalue fallback when the iteration stalls);
/// the count always uses the dense decomposition.
pub fn spectral_radius(bundle: &JacobianBundle) -> Result<(f64, usize), IndexError> {
    let b = scaled_off(&bundle.diag, &bundle.off)?;
    let magnitudes = eigen_magnitudes(&b);
    let dense_rho = magnitudes.iter().cloned().fold(0.0f64, f64::max);
    let rho = power_iteration(&b).unwrap_or(dense_rho);
    let n_rho = if rho > 0.0 {
        magnitudes
            .iter()
            .filter(|&&m| m >= NEAR_RADIUS_FRACTION * rho)
            .count()
    } else {
        0
    };
    Ok((rho, n_rho))
}

/// Evaluate the two-sided approximation-error inequalities and the
/// conjectured tighter bound value. Requires `rho < 1`.
pub fn error_bounds(
    vsi: f64,
    avsi: f64,
    rho: f64,
    n: usize,
    n_rho: usize,
) -> Result<(bool, bool, f64), IndexError> {
    if !(rho < 1.0) || rho < 0.0 {
        return Err(IndexError::RhoOutOfRange { rho });
    }
    let gap = -rho * (1.0 - rho).ln();
    let lower_ok = vsi <= avsi + BOUND_SLACK;
    let upper_ok = avsi <= vsi + gap + BOUND_SLACK;
    let conjecture = vsi + (n_rho as f64 / n as f64) * gap;
    Ok((lower_ok, upper_ok, conjecture))
}

/// Everything the monitor reports for one operating point. Exact and
/// approximate indices carry `None` tags outside their validity region:
/// a non-positive reduced determinant for the exact index, a non-positive
/// diagonal term for the approximate one (with the offending buses listed).
#[derive(Debug, Clone, Serialize)]
pub struct IndexReport {
    pub vsi: Option<f64>,
    pub det_sign: i8,
    pub avsi: Option<f64>,
    /// Per-bus log terms; `-inf` where the diagonal term is nonpositive.
    pub h: Vec<f64>,
    /// Buses whose diagonal term crossed zero (approximate collapse signal).
    pub nonpositive_terms: Vec<BusId>,
    pub rho: Option<f64>,
    pub n_rho: Option<usize>,
    pub bound_lower: Option<f64>,
    pub bound_upper: Option<f64>,
    pub bound_conjecture: Option<f64>,
    pub assumption1_holds: bool,
    /// True when the error bounds are claimed to hold: mono-directional
    /// flows, both indices valid, and `rho < 1`.
    pub bounds_applicable: bool,
}

impl IndexReport {
    /// Approximation error `avsi - vsi` when both indices are valid.
    pub fn error(&self) -> Option<f64> {
        Some(self.avsi? - self.vsi?)
    }
}

/// Compute the full index report for an operating point. Total: invalid
/// regions are tagged rather than erroring, since the monitor must keep
/// reporting through collapse and reverse-flow conditions.
pub fn index_report(
    tree: &NetworkTree,
    scenario: &LoadScenario,
    op: &OperatingPoint,
) -> IndexReport {
    let n = tree.pq_count();
    let paths = path_impedances(tree);
    let measurements = measurements_from_op(tree, op);

    let mut h = Vec::with_capacity(n);
    let mut nonpositive_terms = Vec::new();
    for j in 1..=n {
        let term = diag_term_local(tree.line(j), &paths, &measurements[j - 1]);
        if term > 0.0 {
            h.push(term.ln());
        } else {
            h.push(f64::NEG_INFINITY);
            nonpositive_terms.push(j);
        }
    }
    let avsi = if nonpositive_terms.is_empty() {
        Some(h.iter().sum::<f64>() / n as f64)
    } else {
        None
    };

    let reduced =
        build_reduced_jacobian(tree, scenario, op).expect("dimensions validated by the caller");
    let det = log_det(&reduced);
    let vsi = (det.sign == 1).then(|| det.log_abs / n as f64);

    let diag = reduced.diagonal();
    let mut off = reduced;
    off.set_diagonal(&DVector::zeros(n));
    let rho_pair = scaled_off(&diag, &off).ok().map(|b| {
        let magnitudes = eigen_magnitudes(&b);
        let dense_rho = magnitudes.iter().cloned().fold(0.0f64, f64::max);
        let rho = power_iteration(&b).unwrap_or(dense_rho);
        let n_rho = if rho > 0.0 {
            magnitudes
                .iter()
                .filter(|&&m| m >= NEAR_RADIUS_FRACTION * rho)
                .count()
        } else {
            0
        };
        (rho, n_rho)
    });
    let rho = rho_pair.map(|(r, _)| r);
    let n_rho = rho_pair.map(|(_, c)| c);

    let assumption1_holds = op
        .monotone_flows(tree)
        .map(|r| r.all_nonnegative)
        .unwrap_or(false);

    let (bound_lower, bound_upper, bound_conjecture) = match (vsi, rho, n_rho) {
        (Some(v), Some(r), Some(c)) if r < 1.0 => {
            let gap = -r * (1.0 - r).ln();
            (
                Some(v),
                Some(v + gap),
                Some(v + (c as f64 / n as f64) * gap),
            )
        }
        _ => (None, None, None),
    };
    let bounds_applicable =
        assumption1_holds && vsi.is_some() && avsi.is_some() && rho.is_some_and(|r| r < 1.0);

    IndexReport {
        vsi,
        det_sign: det.sign,
        avsi,
        h,
        nonpositive_terms,
        rho,
        n_rho,
        bound_lower,
        bound_upper,
        bound_conjecture,
        assumption1_holds,
        bounds_applicable,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Line, NetworkTree, ScenarioDirection};
    use crate::jacobian::build_jacobian_bundle;
    use crate::solver::{find_loadability_limit, solve_power_flow};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn two_bus(r: f64, x: f64) -> NetworkTree {
        NetworkTree::new(vec![Line {
            parent: 0,
            child: 1,
            r,
            x,
        }])
        .unwrap()
    }

    fn random_tree(n: usize, seed: u64) -> (NetworkTree, LoadScenario) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut lines = Vec::new();
        for child in 1..=n {
            let parent = if child == 1 {
                0
            } else {
                rng.random_range(0..child)
            };
            lines.push(Line {
                parent,
                child,
                r: rng.random_range(0.005..0.03),
                x: rng.random_range(0.005..0.03),
            });
        }
        let tree = NetworkTree::new(lines).unwrap();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.06)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.005..0.03)).collect();
        (tree, LoadScenario::new(1.0, p, q))
    }

    #[test]
    fn flat_terms_are_one_and_indices_zero() {
        let (tree, _) = random_tree(6, 3);
        let scenario = LoadScenario::flat(6);
        let op = OperatingPoint::flat(&tree, &scenario);
        let paths = path_impedances(&tree);
        for j in 1..=6 {
            assert_eq!(diag_term_global(&tree, &paths, &op, j), 1.0);
            let m = LocalMeasurement {
                voltage_sq: 1.0,
                current_sq: 0.0,
            };
            assert_eq!(diag_term_local(tree.line(j), &paths, &m), 1.0);
        }
        let report = index_report(&tree, &scenario, &op);
        assert_eq!(report.vsi, Some(0.0));
        assert_eq!(report.avsi, Some(0.0));
        assert_eq!(report.rho, Some(0.0));
        assert!(report.h.iter().all(|&h| h == 0.0));
        let (lower_ok, upper_ok, conjecture) = error_bounds(0.0, 0.0, 0.0, 6, 0).unwrap();
        assert!(lower_ok && upper_ok);
        assert_eq!(conjecture, 0.0);
    }

    #[test]
    fn two_bus_term_drops_the_path_component() {
        let tree = two_bus(0.1, 0.05);
        let scenario = LoadScenario::new(1.0, vec![0.4], vec![0.2]);
        let op = solve_power_flow(&tree, &scenario, 1e-12, 500).unwrap().op;
        let paths = path_impedances(&tree);
        let term = diag_term_global(&tree, &paths, &op, 1);
        let expected = 1.0 - 2.0 * op.p_flow[0] * 0.1 - 2.0 * op.q_flow[0] * 0.05;
        assert!((term - expected).abs() < 1e-14);
    }

    #[test]
    fn local_equals_global_at_solutions() {
        let (tree, scenario) = random_tree(10, 17);
        let op = solve_power_flow(&tree, &scenario, 1e-10, 200).unwrap().op;
        let paths = path_impedances(&tree);
        let measurements = measurements_from_op(&tree, &op);
        for j in 1..=10 {
            let local = diag_term_local(tree.line(j), &paths, &measurements[j - 1]);
            let global = diag_term_global(&tree, &paths, &op, j);
            assert!(
                (local - global).abs() <= 1e-12,
                "bus {j}: {local} vs {global}"
            );
        }
    }

    #[test]
    fn single_pq_bus_has_exact_avsi_and_zero_rho() {
        let tree = two_bus(0.1, 0.1);
        let scenario = LoadScenario::new(1.0, vec![0.6], vec![0.3]);
        let op = solve_power_flow(&tree, &scenario, 1e-12, 500).unwrap().op;
        let report = index_report(&tree, &scenario, &op);
        let (vsi, avsi) = (report.vsi.unwrap(), report.avsi.unwrap());
        assert!((vsi - avsi).abs() <= 1e-15);
        assert_eq!(report.rho, Some(0.0));
    }

    #[test]
    fn two_bus_term_vanishes_at_the_limit() {
        let tree = two_bus(0.1, 0.1);
        let base = LoadScenario::flat(1);
        let direction = ScenarioDirection {
            dp: vec![1.0],
            dq: vec![0.5],
        };
        let trace = find_loadability_limit(&tree, &base, &direction, 1e-8).unwrap();
        let last = trace.steps.last().unwrap();
        let paths = path_impedances(&tree);
        let term = diag_term_global(&tree, &paths, &last.solve.op, 1);
        assert!(term > 0.0);
        assert!(term < 1e-3, "term at the limit: {term}");
    }

    #[test]
    fn power_iteration_matches_dense_eigenvalues() {
        let lines = vec![
            Line {
                parent: 0,
                child: 1,
                r: 0.02,
                x: 0.04,
            },
            Line {
                parent: 1,
                child: 2,
                r: 0.03,
                x: 0.01,
            },
            Line {
                parent: 2,
                child: 3,
                r: 0.01,
                x: 0.02,
            },
            Line {
                parent: 3,
                child: 4,
                r: 0.02,
                x: 0.02,
            },
        ];
        let tree = NetworkTree::new(lines).unwrap();
        let base = LoadScenario::flat(4);
        let direction = ScenarioDirection {
            dp: vec![0.25; 4],
            dq: vec![0.12; 4],
        };
        let trace = find_loadability_limit(&tree, &base, &direction, 1e-6).unwrap();
        let last = trace.steps.last().unwrap();
        let scenario = base.along_ray(&direction, last.lambda);
        let bundle = build_jacobian_bundle(&tree, &scenario, &last.solve.op).unwrap();
        let (rho, _) = spectral_radius(&bundle).unwrap();
        let b = DMatrix::from_fn(4, 4, |i, j| -bundle.off[(i, j)] / bundle.diag[i]);
        let dense = b
            .complex_eigenvalues()
            .iter()
            .map(|ev| ev.norm())
            .fold(0.0f64, f64::max);
        assert!(
            (rho - dense).abs() <= 1e-9,
            "power iteration {rho} vs dense {dense}"
        );
        assert!(rho > 0.0 && rho < 1.0);
    }

    #[test]
    fn rho_grows_toward_the_limit_and_error_is_bounded() {
        let (tree, scenario) = random_tree(8, 5);
        let direction = ScenarioDirection::uniform(&scenario);
        let trace = find_loadability_limit(&tree, &scenario, &direction, 1e-6).unwrap();
        let first = &trace.steps[0].index;
        let last = &trace.steps[trace.steps.len() - 1].index;
        assert!(last.rho.unwrap() > first.rho.unwrap());
        for step in &trace.steps {
            let report = &step.index;
            assert!(report.assumption1_holds);
            assert!(report.bounds_applicable);
            let (vsi, avsi, rho) = (
                report.vsi.unwrap(),
                report.avsi.unwrap(),
                report.rho.unwrap(),
            );
            assert!(rho < 1.0);
            let (lower_ok, upper_ok, _) =
                error_bounds(vsi, avsi, rho, 8, report.n_rho.unwrap()).unwrap();
            assert!(lower_ok, "lower bound violated at lambda {}", step.lambda);
            assert!(upper_ok, "upper bound violated at lambda {}", step.lambda);
        }
    }

    #[test]
    fn rho_out_of_range_is_rejected() {
        assert!(matches!(
            error_bounds(-1.0, -0.9, 1.0, 4, 1),
            Err(IndexError::RhoOutOfRange { .. })
        ));
    }

    #[test]
    fn nonpositive_term_is_tagged_in_the_report() {
        let tree = two_bus(0.1, 0.1);
        let scenario = LoadScenario::new(1.0, vec![0.4], vec![0.2]);
        let solved = solve_power_flow(&tree, &scenario, 1e-10, 200).unwrap().op;
        // Force a measured state past the collapse surface.
        let mut op = solved;
        op.current_sq[0] = 100.0;
        let report = index_report(&tree, &scenario, &op);
        assert_eq!(report.avsi, None);
        assert_eq!(report.nonpositive_terms, vec![1]);
        assert!(report.h[0] == f64::NEG_INFINITY);
        assert!(matches!(
            avsi(&tree, &op),
            Err(IndexError::NonpositiveDiagTerm { bus: 1, .. })
        ));
    }

    #[test]
    fn avsi_is_permutation_invariant_mean() {
        let (tree, scenario) = random_tree(9, 23);
        let op = solve_power_flow(&tree, &scenario, 1e-10, 200).unwrap().op;
        let result = avsi(&tree, &op).unwrap();
        let mut shuffled = result.h.clone();
        shuffled.reverse();
        let mean: f64 = shuffled.iter().sum::<f64>() / shuffled.len() as f64;
        assert!((mean - result.avsi).abs() <= 1e-15);
    }
}
