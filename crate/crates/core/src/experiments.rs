//! Experiment protocols: demand sweeps to collapse, random loading ensembles,
//! generator-penetration studies, parameter-uncertainty robustness, a
//! synthetic feeder generator, and the index-complexity timing study.
//!
//! Every protocol is deterministic under a fixed seed; ensemble scenarios run
//! in parallel but rows are emitted in scenario order.

use crate::grid::{
    path_impedances, Line, LoadScenario, NetworkFile, NetworkTree, ScenarioDirection,
};
use crate::index::{avsi, bus_log_terms, measurements_from_op};
use crate::jacobian::{build_reduced_jacobian, log_det, vsi};
use crate::solver::{
    find_loadability_limit, solve_power_flow_with, trace_feasibility, ContinuationTrace,
    SolveError, SolverOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// The experiment a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sweep,
    RandomEnsemble,
    DgPenetration,
    Uncertainty,
}

/// Full description of an experiment run; serialized as a JSON sidecar next
/// to every CSV output so figures can be regenerated from artifacts alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub network: String,
    pub mode: Mode,
    pub count: usize,
    pub seed: u64,
    pub power_factor: f64,
    pub dg_fraction: f64,
    pub penetration_levels: Vec<f64>,
    pub uncertainty_pct: f64,
    pub tol_lambda: f64,
}

impl ScenarioSpec {
    pub fn new(network: impl Into<String>, mode: Mode) -> Self {
        Self {
            network: network.into(),
            mode,
            count: 100,
            seed: 1,
            power_factor: 0.9,
            dg_fraction: 0.2,
            penetration_levels: (1..=10).map(|k| k as f64 / 10.0).collect(),
            uncertainty_pct: 0.25,
            tol_lambda: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        if self.count < 1 {
            return Err(SolveError::DimensionMismatch("count must be >= 1".into()));
        }
        if self
            .penetration_levels
            .iter()
            .any(|&l| !(0.0..=1.0).contains(&l))
        {
            return Err(SolveError::DimensionMismatch(
                "penetration levels must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.uncertainty_pct) {
            return Err(SolveError::DimensionMismatch(
                "uncertainty_pct must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => "nan".to_string(),
    }
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    // SplitMix64 step keeps scenario streams independent of thread order.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Synthetic feeder generation
// ---------------------------------------------------------------------------

/// Knobs of the synthetic feeder generator. The defaults produce feeders
/// whose index at the loadability limit sits near -1, matching realistic
/// medium-voltage feeders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeederConfig {
    pub buses: usize,
    pub seed: u64,
    /// Probability that a new bus extends the most recent one instead of
    /// attaching to a uniformly random earlier bus (1.0 gives a single path).
    pub chain_bias: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Reactance-to-resistance ratio range.
    pub x_over_r_min: f64,
    pub x_over_r_max: f64,
    /// Per-bus active demand range (per-unit).
    pub p_min: f64,
    pub p_max: f64,
    pub power_factor: f64,
}

impl FeederConfig {
    pub fn new(buses: usize, seed: u64) -> Self {
        Self {
            buses,
            seed,
            chain_bias: 0.8,
            r_min: 0.002,
            r_max: 0.012,
            x_over_r_min: 0.5,
            x_over_r_max: 2.0,
            p_min: 0.002,
            p_max: 0.012,
            power_factor: 0.9,
        }
    }
}

/// Reactive demand matching an active demand at a given power factor,
/// preserving the sign (generators export both).
pub fn reactive_for(p: f64, power_factor: f64) -> f64 {
    let phi = power_factor.clamp(1e-6, 1.0).acos();
    p * phi.tan()
}

/// Generate a random radial feeder with a single feeder head. Deterministic
/// in the seed.
pub fn generate_feeder(config: &FeederConfig) -> NetworkFile {
    assert!(config.buses >= 1, "a feeder needs at least one PQ bus");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lines = Vec::with_capacity(config.buses);
    for child in 1..=config.buses {
        let parent = if child == 1 {
            0
        } else if rng.random_bool(config.chain_bias) {
            child - 1
        } else {
            rng.random_range(1..child)
        };
        let r = rng.random_range(config.r_min..=config.r_max);
        let x = r * rng.random_range(config.x_over_r_min..=config.x_over_r_max);
        lines.push(Line {
            parent,
            child,
            r,
            x,
        });
    }
    let tree = NetworkTree::new(lines).expect("generated lines always form a tree");
    let p: Vec<f64> = (0..config.buses)
        .map(|_| rng.random_range(config.p_min..=config.p_max))
        .collect();
    let q: Vec<f64> = p
        .iter()
        .map(|&p| reactive_for(p, config.power_factor))
        .collect();
    NetworkFile {
        tree,
        scenario: LoadScenario::new(1.0, p, q),
    }
}

// ---------------------------------------------------------------------------
// Demand sweep
// ---------------------------------------------------------------------------

/// A sweep to collapse along a demand ray, with the index report per step.
#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub trace: ContinuationTrace,
}

/// Trace the uniform-scaling ray (or a caller-supplied one) to the
/// loadability limit.
pub fn run_sweep(
    tree: &NetworkTree,
    base: &LoadScenario,
    direction: Option<ScenarioDirection>,
    tol_lambda: f64,
) -> Result<SweepResult, SolveError> {
    let direction = direction.unwrap_or_else(|| ScenarioDirection::uniform(base));
    let trace = find_loadability_limit(tree, base, &direction, tol_lambda)?;
    Ok(SweepResult { trace })
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("lambda,vsi,avsi,error,rho,bound_upper,bound_conjecture,assumption1\n");
        for step in &self.trace.steps {
            let r = &step.index;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                step.lambda,
                fmt_opt(r.vsi),
                fmt_opt(r.avsi),
                fmt_opt(r.error()),
                fmt_opt(r.rho),
                fmt_opt(r.bound_upper),
                fmt_opt(r.bound_conjecture),
                r.assumption1_holds
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Random loading ensembles
// ---------------------------------------------------------------------------

/// Index values at the loadability limit of one random scenario.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleRow {
    pub scenario: usize,
    pub lambda_star: f64,
    pub vsi: f64,
    pub avsi: f64,
    pub error: f64,
    pub error_pct: f64,
    pub assumption1: bool,
}

/// Column-wise minimum / average / maximum over the ensemble.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ColumnStats {
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

fn column_stats(values: impl Iterator<Item = f64> + Clone) -> ColumnStats {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        min = min.min(v);
        max = max.max(v);
        sum += v;
        count += 1;
    }
    ColumnStats {
        min,
        avg: sum / count.max(1) as f64,
        max,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub rows: Vec<EnsembleRow>,
    /// Scenarios dropped because their base case or limit search failed.
    pub failed: usize,
    pub vsi_stats: ColumnStats,
    pub avsi_stats: ColumnStats,
    pub error_pct_stats: ColumnStats,
}

/// Per-bus load multipliers drawn uniformly from `[0.5, 1.5]`, one per PQ
/// bus, applied to both demand components.
fn randomized_scenario(base: &LoadScenario, rng: &mut impl Rng) -> LoadScenario {
    let mut scenario = base.clone();
    for j in 0..scenario.p.len() {
        let mult = rng.random_range(0.5..=1.5);
        scenario.p[j] *= mult;
        scenario.q[j] *= mult;
    }
    scenario
}

/// Index values at the limit of one scenario: the last converged continuation
/// point along the scenario's uniform ray.
fn limit_row(
    tree: &NetworkTree,
    scenario: &LoadScenario,
    tol_lambda: f64,
    index: usize,
) -> Option<EnsembleRow> {
    let direction = ScenarioDirection::uniform(scenario);
    let raw = trace_feasibility(tree, scenario, &direction, tol_lambda).ok()?;
    let (lambda, solve) = raw.points.last()?;
    let at_limit = scenario.along_ray(&direction, *lambda);
    let report = crate::index::index_report(tree, &at_limit, &solve.op);
    let (vsi, avsi) = (report.vsi?, report.avsi?);
    Some(EnsembleRow {
        scenario: index,
        lambda_star: 0.5 * (raw.lo + raw.hi),
        vsi,
        avsi,
        error: avsi - vsi,
        error_pct: 100.0 * (avsi - vsi).abs() / vsi.abs(),
        assumption1: report.assumption1_holds,
    })
}

/// Repeat the sweep-to-collapse protocol for `count` random loading
/// scenarios and collect the indices at the loadability limits.
pub fn run_random_ensemble(
    tree: &NetworkTree,
    base: &LoadScenario,
    spec: &ScenarioSpec,
) -> Result<EnsembleSummary, SolveError> {
    spec.validate()?;
    let results: Vec<Option<EnsembleRow>> = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(spec.seed, i as u64));
            let scenario = randomized_scenario(base, &mut rng);
            limit_row(tree, &scenario, spec.tol_lambda, i)
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    let rows: Vec<EnsembleRow> = results.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(SolveError::BaseInfeasible);
    }
    Ok(EnsembleSummary {
        vsi_stats: column_stats(rows.iter().map(|r| r.vsi)),
        avsi_stats: column_stats(rows.iter().map(|r| r.avsi)),
        error_pct_stats: column_stats(rows.iter().map(|r| r.error_pct)),
        rows,
        failed,
    })
}

impl EnsembleSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,lambda_star,vsi,avsi,error,error_pct,assumption1\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.scenario,
                row.lambda_star,
                row.vsi,
                row.avsi,
                row.error,
                row.error_pct,
                row.assumption1
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Generator penetration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DgRow {
    pub penetration: f64,
    pub vsi_avg: f64,
    pub avsi_avg: f64,
    pub eps_avg: f64,
    pub eps_max: f64,
    pub eps_pct_avg: f64,
    pub eps_pct_max: f64,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DgTable {
    pub rows: Vec<DgRow>,
    pub dg_buses: Vec<Vec<usize>>,
}

/// Distributed-generation study: a seeded fifth of the buses become constant
/// power sources sized so that their total apparent power is the requested
/// fraction of the total load apparent power, and the ensemble protocol runs
/// at every penetration level. Loads and generation scale proportionally
/// along the continuation ray.
pub fn run_dg_penetration(
    tree: &NetworkTree,
    base: &LoadScenario,
    spec: &ScenarioSpec,
) -> Result<DgTable, SolveError> {
    spec.validate()?;
    let n = tree.pq_count();
    let dg_count = ((spec.dg_fraction * n as f64).ceil() as usize).clamp(1, n);

    // Reshape the base loads to the study's uniform power factor.
    let mut load_base = base.clone();
    for j in 0..n {
        load_base.q[j] = reactive_for(load_base.p[j], spec.power_factor);
    }

    let mut rows = Vec::new();
    let mut dg_buses_per_level = Vec::new();
    for (level_idx, &penetration) in spec.penetration_levels.iter().enumerate() {
        // Fixed seed per level: generator placement is uniform over the buses.
        let mut placement_rng =
            ChaCha8Rng::seed_from_u64(derived_seed(spec.seed, 0xD6 ^ (level_idx as u64) << 8));
        let mut picks: Vec<usize> = (1..=n).collect();
        for i in (1..picks.len()).rev() {
            picks.swap(i, placement_rng.random_range(0..=i));
        }
        picks.truncate(dg_count);
        picks.sort_unstable();
        dg_buses_per_level.push(picks.clone());

        let results: Vec<Option<EnsembleRow>> = (0..spec.count)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(
                    spec.seed,
                    (level_idx as u64) << 32 | i as u64,
                ));
                let mut scenario = randomized_scenario(&load_base, &mut rng);
                // Generators inject on top of the local load; their total
                // apparent power is the penetration fraction of the total
                // load apparent power.
                let load_apparent: f64 = scenario
                    .p
                    .iter()
                    .zip(&scenario.q)
                    .map(|(p, q)| (p * p + q * q).sqrt())
                    .sum();
                let dg_apparent_each = penetration * load_apparent / dg_count as f64;
                let dg_p = dg_apparent_each * spec.power_factor;
                for &bus in &picks {
                    scenario.p[bus - 1] -= dg_p;
                    scenario.q[bus - 1] -= reactive_for(dg_p, spec.power_factor);
                }
                limit_row(tree, &scenario, spec.tol_lambda, i)
            })
            .collect();
        let failed = results.iter().filter(|r| r.is_none()).count();
        let level_rows: Vec<EnsembleRow> = results.into_iter().flatten().collect();
        if level_rows.is_empty() {
            return Err(SolveError::BaseInfeasible);
        }
        let abs_errors: Vec<f64> = level_rows.iter().map(|r| r.error.abs()).collect();
        rows.push(DgRow {
            penetration,
            vsi_avg: column_stats(level_rows.iter().map(|r| r.vsi)).avg,
            avsi_avg: column_stats(level_rows.iter().map(|r| r.avsi)).avg,
            eps_avg: column_stats(abs_errors.iter().copied()).avg,
            eps_max: column_stats(abs_errors.iter().copied()).max,
            eps_pct_avg: column_stats(level_rows.iter().map(|r| r.error_pct)).avg,
            eps_pct_max: column_stats(level_rows.iter().map(|r| r.error_pct)).max,
            failed,
        });
    }
    Ok(DgTable {
        rows,
        dg_buses: dg_buses_per_level,
    })
}

impl DgTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "penetration,vsi_avg,avsi_avg,eps_avg,eps_max,eps_pct_avg,eps_pct_max,failed\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.penetration,
                row.vsi_avg,
                row.avsi_avg,
                row.eps_avg,
                row.eps_max,
                row.eps_pct_avg,
                row.eps_pct_max,
                row.failed
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Parameter uncertainty
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct UncertaintyRow {
    pub lambda: f64,
    pub vsi_exact: f64,
    /// Percentage error of the exact index recomputed with inflated line
    /// parameters, against the true exact index.
    pub vsi_perturbed_pct_err: Option<f64>,
    pub avsi_perturbed_pct_err: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct UncertaintyTable {
    pub rows: Vec<UncertaintyRow>,
}

/// Worst-case parameter mismatch: every line impedance over-estimated by
/// `uncertainty_pct`. Both indices are recomputed from the exact power-flow
/// states using the inflated parameters; each error column measures an
/// index against its own exact-parameter value along the sweep.
pub fn run_uncertainty(
    tree: &NetworkTree,
    base: &LoadScenario,
    spec: &ScenarioSpec,
) -> Result<UncertaintyTable, SolveError> {
    spec.validate()?;
    let inflated_lines: Vec<Line> = tree
        .lines()
        .iter()
        .map(|l| Line {
            parent: l.parent,
            child: l.child,
            r: l.r * (1.0 + spec.uncertainty_pct),
            x: l.x * (1.0 + spec.uncertainty_pct),
        })
        .collect();
    let inflated =
        NetworkTree::new(inflated_lines).expect("inflating impedances preserves validity");
    let inflated_paths = path_impedances(&inflated);
    let n = tree.pq_count() as f64;

    let direction = ScenarioDirection::uniform(base);
    let trace = find_loadability_limit(tree, base, &direction, spec.tol_lambda)?;
    let mut rows = Vec::new();
    for step in &trace.steps {
        let scenario = base.along_ray(&direction, step.lambda);
        let (Some(vsi_exact), Some(avsi_exact)) = (step.index.vsi, step.index.avsi) else {
            continue;
        };
        let vsi_pert = build_reduced_jacobian(&inflated, &scenario, &step.solve.op)
            .ok()
            .map(|m| log_det(&m))
            .filter(|d| d.sign == 1)
            .map(|d| d.log_abs / n);
        let measurements = measurements_from_op(tree, &step.solve.op);
        let avsi_pert = bus_log_terms(&inflated, &inflated_paths, &measurements)
            .ok()
            .map(|h| h.iter().sum::<f64>() / n);
        let pct =
            |pert: Option<f64>, exact: f64| pert.map(|v| 100.0 * (v - exact).abs() / exact.abs());
        rows.push(UncertaintyRow {
            lambda: step.lambda,
            vsi_exact,
            vsi_perturbed_pct_err: pct(vsi_pert, vsi_exact),
            avsi_perturbed_pct_err: pct(avsi_pert, avsi_exact),
        });
    }
    Ok(UncertaintyTable { rows })
}

impl UncertaintyTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("lambda,vsi_exact,vsi_perturbed_pct_err,avsi_perturbed_pct_err\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.lambda,
                row.vsi_exact,
                fmt_opt(row.vsi_perturbed_pct_err),
                fmt_opt(row.avsi_perturbed_pct_err)
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Complexity timing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TimingRow {
    pub n: usize,
    pub avsi_seconds: f64,
    pub vsi_seconds: f64,
}

/// Wall-time of the approximate index (linear work) and the dense-log-det
/// exact index (cubic work) on path feeders of increasing size.
pub fn measure_index_scaling(sizes: &[usize], seed: u64) -> Vec<TimingRow> {
    use std::hint::black_box;
    use std::time::Instant;

    let mut rows = Vec::new();
    for &n in sizes {
        let mut config = FeederConfig::new(n, seed);
        config.chain_bias = 1.0;
        // Path resistance grows with length, so demands shrink like 1/n^2 to
        // keep every size well inside the solvable region.
        let nf = n as f64;
        config.p_min = 0.5 / (nf * nf);
        config.p_max = 2.0 / (nf * nf);
        let file = generate_feeder(&config);
        let report = solve_power_flow_with(&file.tree, &file.scenario, &SolverOptions::default())
            .expect("light loads always solve");
        let op = report.op;

        let time_loop = |mut body: Box<dyn FnMut()>, min_seconds: f64| -> f64 {
            // Warm up caches and branch predictors once.
            body();
            let mut reps = 0usize;
            let start = Instant::now();
            loop {
                body();
                reps += 1;
                let elapsed = start.elapsed().as_secs_f64();
                if elapsed >= min_seconds && reps >= 3 {
                    return elapsed / reps as f64;
                }
            }
        };

        let tree_ref = &file.tree;
        let op_ref = &op;
        let avsi_seconds = time_loop(
            Box::new(move || {
                black_box(avsi(black_box(tree_ref), black_box(op_ref)).unwrap());
            }),
            0.02,
        );
        let scenario_ref = &file.scenario;
        let vsi_seconds = time_loop(
            Box::new(move || {
                black_box(
                    vsi(
                        black_box(tree_ref),
                        black_box(scenario_ref),
                        black_box(op_ref),
                    )
                    .unwrap(),
                );
            }),
            0.05,
        );
        rows.push(TimingRow {
            n,
            avsi_seconds,
            vsi_seconds,
        });
    }
    rows
}

/// Least-squares slope of `ln t` against `ln n`.
pub fn log_log_slope(points: &[(usize, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(size, _)| (size as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, t)| t.ln()).collect();
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_feeders_are_deterministic_and_solvable() {
        let config = FeederConfig::new(40, 7);
        let a = generate_feeder(&config);
        let b = generate_feeder(&config);
        assert_eq!(a, b);
        assert_eq!(a.tree.pq_count(), 40);
        assert_eq!(a.tree.children(0).len(), 1, "single feeder head");
        let report =
            solve_power_flow_with(&a.tree, &a.scenario, &SolverOptions::default()).unwrap();
        assert!(report.converged);
    }

    #[test]
    fn two_bus_sweep_has_identical_indices() {
        let file = generate_feeder(&FeederConfig::new(1, 3));
        let flat_base = LoadScenario::flat(1);
        let direction = Some(ScenarioDirection::uniform(&file.scenario));
        let sweep = run_sweep(&file.tree, &flat_base, direction, 1e-6).unwrap();
        for step in &sweep.trace.steps {
            let (vsi, avsi) = (step.index.vsi.unwrap(), step.index.avsi.unwrap());
            assert!((vsi - avsi).abs() <= 1e-12);
        }
        let csv = sweep.to_csv();
        assert!(csv.starts_with("lambda,vsi,avsi,error,rho"));
        let first_row = csv.lines().nth(1).unwrap();
        assert!(
            first_row.starts_with("0,0,0,0,0,"),
            "flat start row: {first_row}"
        );
    }

    #[test]
    fn ensembles_are_deterministic() {
        let file = generate_feeder(&FeederConfig::new(12, 5));
        let mut spec = ScenarioSpec::new("mem", Mode::RandomEnsemble);
        spec.count = 4;
        spec.seed = 42;
        let a = run_random_ensemble(&file.tree, &file.scenario, &spec).unwrap();
        let b = run_random_ensemble(&file.tree, &file.scenario, &spec).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.failed, 0);
        // The fat sandwich: VSI <= AVSI row-wise while flows stay forward.
        for row in &a.rows {
            assert!(row.assumption1);
            assert!(row.vsi <= row.avsi + 1e-12);
        }
        assert!(a.vsi_stats.min <= a.vsi_stats.avg && a.vsi_stats.avg <= a.vsi_stats.max);
    }

    #[test]
    fn zero_penetration_matches_plain_ensemble() {
        // The generated base already sits at the study power factor, so a
        // zero-penetration level replays the plain ensemble bit for bit.
        let file = generate_feeder(&FeederConfig::new(10, 11));
        let mut spec = ScenarioSpec::new("mem", Mode::DgPenetration);
        spec.count = 3;
        spec.seed = 9;
        spec.penetration_levels = vec![0.0];
        let table = run_dg_penetration(&file.tree, &file.scenario, &spec).unwrap();
        assert_eq!(table.rows.len(), 1);
        let row = &table.rows[0];
        assert_eq!(row.failed, 0);
        let plain = run_random_ensemble(&file.tree, &file.scenario, &spec).unwrap();
        let plain_vsi = column_stats(plain.rows.iter().map(|r| r.vsi)).avg;
        let plain_avsi = column_stats(plain.rows.iter().map(|r| r.avsi)).avg;
        assert_eq!(row.vsi_avg, plain_vsi);
        assert_eq!(row.avsi_avg, plain_avsi);
        // No generation: the error keeps the analytic sign.
        assert!(row.avsi_avg >= row.vsi_avg);
    }

    #[test]
    fn generation_raises_the_index_at_the_limit() {
        let file = generate_feeder(&FeederConfig::new(12, 21));
        let mut spec = ScenarioSpec::new("mem", Mode::DgPenetration);
        spec.count = 4;
        spec.seed = 3;
        spec.penetration_levels = vec![0.1, 1.0];
        let table = run_dg_penetration(&file.tree, &file.scenario, &spec).unwrap();
        assert!(
            table.rows[1].vsi_avg > table.rows[0].vsi_avg,
            "reverse flows shrink the stable margin: {} vs {}",
            table.rows[1].vsi_avg,
            table.rows[0].vsi_avg
        );
    }

    #[test]
    fn zero_uncertainty_gives_zero_errors() {
        let file = generate_feeder(&FeederConfig::new(8, 2));
        let mut spec = ScenarioSpec::new("mem", Mode::Uncertainty);
        spec.uncertainty_pct = 0.0;
        let table = run_uncertainty(&file.tree, &file.scenario, &spec).unwrap();
        assert!(!table.rows.is_empty());
        for row in &table.rows {
            assert_eq!(row.vsi_perturbed_pct_err, Some(0.0));
            assert_eq!(row.avsi_perturbed_pct_err, Some(0.0));
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = ScenarioSpec::new("net.json", Mode::Sweep);
        spec.count = 0;
        assert!(spec.validate().is_err());
        let mut spec = ScenarioSpec::new("net.json", Mode::Sweep);
        spec.uncertainty_pct = 1.0;
        assert!(spec.validate().is_err());
        let mut spec = ScenarioSpec::new("net.json", Mode::Sweep);
        spec.penetration_levels = vec![1.5];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn log_log_slope_of_exact_powers() {
        let cubic: Vec<(usize, f64)> = [100usize, 200, 400, 800]
            .iter()
            .map(|&n| (n, (n as f64).powi(3) * 1e-9))
            .collect();
        assert!((log_log_slope(&cubic) - 3.0).abs() < 1e-12);
        let linear: Vec<(usize, f64)> = [100usize, 200, 400, 800]
            .iter()
            .map(|&n| (n, n as f64 * 1e-7))
            .collect();
        assert!((log_log_slope(&linear) - 1.0).abs() < 1e-12);
    }
}
