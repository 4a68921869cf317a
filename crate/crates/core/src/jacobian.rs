//! Power-flow Jacobians in the branch-flow variables and the exact voltage
//! stability index.
//!
//! Two routes to the same determinant: the full `(4n+2) x (4n+2)` Jacobian of
//! the branch-flow residual, and the reduced `n x n` Jacobian assembled from
//! its closed form with the inverse reduced incidence applied through
//! tree-ordered solves (never a dense inverse). Their determinants agree, and
//! the reduced determinant stays positive inside the voltage stability
//! region, which is what the index reports.

use crate::grid::{LoadScenario, NetworkTree};
use crate::solver::{bfm_residual_state, OperatingPoint};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JacobianError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("determinant is not positive (sign {sign}); outside the voltage stability region")]
    NegativeDeterminant { sign: i8 },
}

/// Sign and natural log of a determinant magnitude. The determinant of the
/// reduced Jacobian scales like `exp(-n)`, which underflows a plain f64 for
/// large feeders, so all determinant work stays in the log domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogDet {
    /// -1, 0 or +1; 0 means a pivot collapsed below `1e-300`.
    pub sign: i8,
    /// `ln |det|`; `-inf` sentinel when `sign == 0`.
    pub log_abs: f64,
}

impl LogDet {
    /// The plain determinant value; may over/underflow for large matrices.
    pub fn value(&self) -> f64 {
        f64::from(self.sign) * self.log_abs.exp()
    }
}

/// Log-determinant via LU with partial pivoting: `log_abs` accumulates
/// `ln |u_kk|` and the sign tracks row swaps and pivot signs. A pivot with
/// magnitude below `1e-300` reports a singular matrix (`sign = 0`).
pub fn log_det(matrix: &DMatrix<f64>) -> LogDet {
    assert_eq!(matrix.nrows(), matrix.ncols(), "matrix must be square");
    let n = matrix.nrows();
    let mut a = matrix.clone_owned();
    let mut sign = 1i8;
    let mut log_abs = 0.0;
    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_mag = a[(k, k)].abs();
        for i in k + 1..n {
            let mag = a[(i, k)].abs();
            if mag > pivot_mag {
                pivot_row = i;
                pivot_mag = mag;
            }
        }
        if pivot_mag < 1e-300 {
            return LogDet {
                sign: 0,
                log_abs: f64::NEG_INFINITY,
            };
        }
        if pivot_row != k {
            a.swap_rows(pivot_row, k);
            sign = -sign;
        }
        let pivot = a[(k, k)];
        if pivot < 0.0 {
            sign = -sign;
        }
        log_abs += pivot.abs().ln();
        // Right-looking update, column-major friendly.
        for i in k + 1..n {
            a[(i, k)] /= pivot;
        }
        for j in k + 1..n {
            let akj = a[(k, j)];
            if akj == 0.0 {
                continue;
            }
            for i in k + 1..n {
                a[(i, j)] -= a[(i, k)] * akj;
            }
        }
    }
    LogDet { sign, log_abs }
}

/// Assemble the full power-flow Jacobian: the derivative of the stacked
/// branch-flow residual with respect to the packed state
/// `[p_flow, q_flow, current_sq, v_1..v_n, p_0, q_0]`.
pub fn build_full_jacobian(
    tree: &NetworkTree,
    scenario: &LoadScenario,
    op: &OperatingPoint,
) -> Result<DMatrix<f64>, JacobianError> {
    check_dims(tree, scenario, op)?;
    let n = tree.pq_count();
    let mut m = DMatrix::zeros(4 * n + 2, 4 * n + 2);
    for j in 1..=n {
        let line = tree.line(j);
        let parent = tree.parent(j);
        let col = j - 1;

        // Active and reactive nodal balance.
        m[(j, col)] += 1.0;
        m[(parent, col)] -= 1.0;
        m[(j, 2 * n + col)] = -line.r;
        m[(n + 1 + j, n + col)] += 1.0;
        m[(n + 1 + parent, n + col)] -= 1.0;
        m[(n + 1 + j, 2 * n + col)] = -line.x;

        // Voltage drop along the edge.
        let row = 2 * n + 1 + j;
        m[(row, col)] = -2.0 * line.r;
        m[(row, n + col)] = -2.0 * line.x;
        m[(row, 2 * n + col)] = line.r * line.r + line.x * line.x;
        m[(row, 3 * n + col)] = -1.0;
        if parent >= 1 {
            m[(row, 3 * n + parent - 1)] = 1.0;
        }

        // Squared-current definition at the sending end.
        let row = 3 * n + 1 + j;
        m[(row, col)] = 2.0 * op.p_flow[col];
        m[(row, n + col)] = 2.0 * op.q_flow[col];
        m[(row, 2 * n + col)] = -op.voltage_sq[parent];
        if parent >= 1 {
            m[(row, 3 * n + parent - 1)] = -op.current_sq[col];
        }
    }
    // Root net-demand slots.
    m[(0, 4 * n)] = -1.0;
    m[(n + 1, 4 * n + 1)] = -1.0;
    Ok(m)
}

/// Central-difference Jacobian of the branch-flow residual; the reference
/// the assembled full Jacobian is validated against. The residual is
/// quadratic in the state, so central differences are exact up to rounding.
pub fn finite_difference_jacobian(
    tree: &NetworkTree,
    scenario: &LoadScenario,
    op: &OperatingPoint,
    step: f64,
) -> DMatrix<f64> {
    let u0 = op.pack_state();
    let dim = u0.len();
    let mut m = DMatrix::zeros(dim, dim);
    let mut u_plus = u0.clone();
    let mut u_minus = u0.clone();
    for col in 0..dim {
        u_plus[col] += step;
        u_minus[col] -= step;
        let r_plus = bfm_residual_state(tree, scenario, &u_plus);
        let r_minus = bfm_residual_state(tree, scenario, &u_minus);
        for row in 0..dim {
            m[(row, col)] = (r_plus[row] - r_minus[row]) / (2.0 * step);
        }
        u_plus[col] = u0[col];
        u_minus[col] = u0[col];
    }
    m
}

/// The reduced power-flow Jacobian: diagonal of sending-end voltages plus
/// flow and loss corrections routed through the inverse reduced incidence.
/// Equals the identity at the flat solution; its determinant matches the
/// full Jacobian's.
pub fn build_reduced_jacobian(
    tree: &NetworkTree,
    scenario: &LoadScenario,
    op: &OperatingPoint,
) -> Result<DMatrix<f64>, JacobianError> {
    check_dims(tree, scenario, op)?;
    let n = tree.pq_count();
    let order = tree.root_to_leaf();

    // Column k of inv(A2)[w] carries -w_k on the ancestors-or-self of bus k,
    // so the flow and loss corrections are assembled one column at a time:
    // a sparse path stamp, a root-to-leaf pass for inv(A2^T) applied to the
    // loss kernel, then the dense column fill.
    let mut data = vec![0.0; n * n];
    let mut col_tr = vec![0.0; n];
    let mut col_tx = vec![0.0; n];
    let mut col_x = vec![0.0; n];
    for k in 1..=n {
        let line_k = tree.line(k);
        let mut bus = k;
        while bus >= 1 {
            col_tr[bus - 1] = -line_k.r;
            col_tx[bus - 1] = -line_k.x;
            bus = tree.parent(bus);
        }

        // Loss kernel [r]^2 + [x]^2 + 2[r] inv(A2) [r] + 2[x] inv(A2) [x],
        // pushed through inv(A2^T) by accumulating down the tree.
        for &bus in order.iter().skip(1) {
            let line = tree.line(bus);
            let mut kernel = 2.0 * (line.r * col_tr[bus - 1] + line.x * col_tx[bus - 1]);
            if bus == k {
                kernel += line.r * line.r + line.x * line.x;
            }
            let parent = tree.parent(bus);
            let upstream = if parent >= 1 { -col_x[parent - 1] } else { 0.0 };
            col_x[bus - 1] = -(kernel + upstream);
        }

        let col = &mut data[(k - 1) * n..k * n];
        for j in 1..=n {
            let parent = tree.parent(j);
            let mut value =
                2.0 * (op.p_flow[j - 1] * col_tr[j - 1] + op.q_flow[j - 1] * col_tx[j - 1]);
            if parent >= 1 {
                value -= op.current_sq[j - 1] * col_x[parent - 1];
            }
            if j == k {
                value += op.voltage_sq[parent];
            }
            col[j - 1] = value;
        }

        let mut bus = k;
        while bus >= 1 {
            col_tr[bus - 1] = 0.0;
            col_tx[bus - 1] = 0.0;
            bus = tree.parent(bus);
        }
    }
    Ok(DMatrix::from_vec(n, n, data))
}

/// Reduced Jacobian split into its diagonal and off-diagonal parts.
#[derive(Debug, Clone)]
pub struct JacobianBundle {
    pub full: DMatrix<f64>,
    pub reduced: DMatrix<f64>,
    pub diag: DVector<f64>,
    pub off: DMatrix<f64>,
}

pub fn build_jacobian_bundle(
    tree: &NetworkTree,
    scenario: &LoadScenario,
    op: &OperatingPoint,
) -> Result<JacobianBundle, JacobianError> {
    let full = build_full_jacobian(tree, scenario, op)?;
    let reduced = build_reduced_jacobian(tree, scenario, op)?;
    let diag = reduced.diagonal();
    let mut off = reduced.clone();
    off.set_diagonal(&DVector::zeros(reduced.nrows()));
    Ok(JacobianBundle {
        full,
        reduced,
        diag,
        off,
    })
}

/// The exact voltage stability index: `ln det` of the reduced Jacobian
/// scaled by the number of PQ buses. Defined only while the determinant is
/// positive, i.e. inside the voltage stability region.
pub fn vsi(
    tree: &NetworkTree,
    scenario: &LoadScenario,
    op: &OperatingPoint,
) -> Result<f64, JacobianError> {
    let reduced = build_reduced_jacobian(tree, scenario, op)?;
    let det = log_det(&reduced);
    if det.sign != 1 {
        return Err(JacobianError::NegativeDeterminant { sign: det.sign });
    }
    Ok(det.log_abs / tree.pq_count() as f64)
}

fn check_dims(
    tree: &NetworkTree,
    scenario: &LoadScenario,
    op: &OperatingPoint,
) -> Result<(), JacobianError> {
    scenario
        .check_dims(tree)
        .map_err(|e| JacobianError::DimensionMismatch(e.to_string()))?;
    op.check_dims(tree)
        .map_err(|e| JacobianError::DimensionMismatch(e.to_string()))?;
    Ok(())
}

/// Plain CSV rendering of a matrix (one row per line), for external
/// inspection of the assembled Jacobians.
pub fn matrix_csv(matrix: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in 0..matrix.nrows() {
        for col in 0..matrix.ncols() {
            if col > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", matrix[(row, col)]));
        }
        out.push('\n');
    }
    out
}

/// Largest relative column discrepancy between two equally sized matrices,
/// with columns weighted by `max(column norm, 1)`.
pub fn max_columnwise_relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut worst = 0.0f64;
    for col in 0..a.ncols() {
        let mut diff = 0.0f64;
        let mut scale = 1.0f64;
        for row in 0..a.nrows() {
            diff = diff.max((a[(row, col)] - b[(row, col)]).abs());
            scale = scale.max(a[(row, col)].abs());
        }
        worst = worst.max(diff / scale);
    }
    worst
}
