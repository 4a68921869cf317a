// `!(v > 0.0)` rejects NaN along with nonpositive values; `v <= 0.0` would not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Steady-state voltage stability for radial distribution feeders.
//!
//! The crate models balanced radial networks in branch-flow variables, solves
//! their power flow by backward/forward sweeps, traces demand rays to the
//! loadability limit, and computes two stability indices from the power-flow
//! Jacobian: the exact log-determinant index and a per-bus approximation that
//! needs only local voltage and current measurements. The approximation comes
//! with computable error bounds, is linear-time, and can be evaluated by
//! average consensus between bus sensors or recursively over a hierarchy of
//! sub-grid operators.

pub mod consensus;
pub mod experiments;
pub mod grid;
pub mod index;
pub mod jacobian;
pub mod solver;

pub use grid::{
    check_monotone_flows, emit_network, incidence_matrices, parse_network, parse_network_file,
    path_impedances, GridError, Line, LoadScenario, NetworkFile, NetworkTree, PathImpedance,
    ScenarioDirection,
};
pub use index::{avsi, error_bounds, index_report, spectral_radius, IndexError, IndexReport};
pub use jacobian::{
    build_full_jacobian, build_jacobian_bundle, build_reduced_jacobian, log_det, vsi,
    JacobianBundle, JacobianError, LogDet,
};
pub use solver::{
    bfm_residual, find_loadability_limit, probe_solve, solve_power_flow, solve_power_flow_with,
    ContinuationTrace, OperatingPoint, SolveError, SolveReport, SolverOptions,
};
