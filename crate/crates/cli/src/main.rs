//! `vstab`: voltage stability studies on radial distribution feeders.
//!
//! Exit codes: 0 on success, 2 when the power flow is infeasible (outside the
//! solvable region), 1 for input or usage errors.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use vstab_core::consensus::{
    hierarchical_aggregate, run_consensus, CommGraph, ConsensusOptions, ConsensusSchedule,
    PartitionNode,
};
use vstab_core::experiments::{
    generate_feeder, run_dg_penetration, run_random_ensemble, run_sweep, run_uncertainty,
    FeederConfig, Mode, ScenarioSpec,
};
use vstab_core::grid::{matpower::parse_matpower, BusId};
use vstab_core::{
    emit_network, index_report, parse_network_file, LoadScenario, NetworkFile, ScenarioDirection,
    SolveError, SolveReport, SolverOptions,
};

#[derive(Parser)]
#[command(
    name = "vstab",
    version,
    about = "Voltage stability indices for radial feeders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the power flow and print the solve report as JSON.
    Solve(SolveArgs),
    /// Solve the power flow and print the stability-index report as JSON.
    Vsi(VsiArgs),
    /// Trace a demand ray to the loadability limit; CSV per step.
    Sweep(SweepArgs),
    /// Random loading scenarios traced to their loadability limits.
    Ensemble(EnsembleArgs),
    /// Ensemble study at increasing generator-penetration levels.
    Dg(DgArgs),
    /// Index robustness under over-estimated line impedances.
    Uncertainty(UncertaintyArgs),
    /// Simulate the distributed averaging of the per-bus index terms.
    Consensus(ConsensusArgs),
    /// Aggregate the per-bus terms over a partition tree.
    Hierarchy(HierarchyArgs),
    /// Generate a random radial feeder file.
    GenFeeder(GenFeederArgs),
    /// Convert a MATPOWER case file to the network JSON format.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Network JSON file (topology plus base loads).
    network: PathBuf,
    /// Optional loads file overriding the base demands.
    #[arg(long)]
    loads: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VsiArgs {
    #[command(flatten)]
    solve: SolveArgs,
    /// Dump the reduced Jacobian at the solution as CSV.
    #[arg(long)]
    dump_reduced: Option<PathBuf>,
    /// Dump the full Jacobian at the solution as CSV.
    #[arg(long)]
    dump_full: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum RayKind {
    Uniform,
    File,
}

#[derive(Args)]
struct SweepArgs {
    network: PathBuf,
    #[arg(long, value_enum, default_value_t = RayKind::Uniform)]
    ray: RayKind,
    /// Direction file ({"buses": [{"id", "p", "q"}]}) when --ray file.
    #[arg(long)]
    ray_file: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    tol_lambda: f64,
}

#[derive(Args)]
struct EnsembleArgs {
    network: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    tol_lambda: f64,
}

#[derive(Args)]
struct DgArgs {
    network: PathBuf,
    /// Penetration levels: comma list and/or `a..b` ranges stepped by 0.1.
    #[arg(long, default_value = "0.1..1.0")]
    levels: String,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    dg_fraction: f64,
    #[arg(long, default_value_t = 0.9)]
    power_factor: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UncertaintyArgs {
    network: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pct: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    tol_lambda: f64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Topology {
    /// Electrical tree restricted to the PQ buses.
    Tree,
    Complete,
    Ring,
    /// Edge list from --graph-file.
    File,
}

#[derive(Args)]
struct ConsensusArgs {
    network: PathBuf,
    #[arg(long, value_enum, default_value_t = Topology::Tree)]
    topology: Topology,
    /// Graph file: {"edges": [[bus, bus], ...]} with 1-based bus ids.
    #[arg(long)]
    graph_file: Option<PathBuf>,
    /// Schedule file: a JSON list of per-round edge lists (cycled).
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_rounds: usize,
    /// Trace CSV (round, node, value); summary JSON goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HierarchyArgs {
    network: PathBuf,
    /// Partition file: nested arrays of 1-based bus ids.
    #[arg(long)]
    partition: PathBuf,
}

#[derive(Args)]
struct GenFeederArgs {
    #[arg(long)]
    buses: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    chain_bias: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    /// MATPOWER .m case file (radial only).
    case: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            let infeasible = err.downcast_ref::<SolveError>().is_some_and(|e| {
                matches!(
                    e,
                    SolveError::NotConverged { .. }
                        | SolveError::BaseInfeasible
                        | SolveError::NoLoadabilityLimit
                )
            });
            std::process::exit(if infeasible { 2 } else { 1 });
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve(args) => {
            let (file, _) = load_network(&args.network, args.loads.as_deref())?;
            let report = solve(&file, args.tol, args.max_iter)?;
            emit_json(&report, args.out.as_deref())
        }
        Command::Vsi(args) => {
            let (file, _) = load_network(&args.solve.network, args.solve.loads.as_deref())?;
            let report = solve(&file, args.solve.tol, args.solve.max_iter)?;
            if let Some(path) = &args.dump_reduced {
                let reduced =
                    vstab_core::build_reduced_jacobian(&file.tree, &file.scenario, &report.op)?;
                std::fs::write(path, vstab_core::jacobian::matrix_csv(&reduced))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(path) = &args.dump_full {
                let full = vstab_core::build_full_jacobian(&file.tree, &file.scenario, &report.op)?;
                std::fs::write(path, vstab_core::jacobian::matrix_csv(&full))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            let index = index_report(&file.tree, &file.scenario, &report.op);
            emit_json(&index, args.solve.out.as_deref())
        }
        Command::Sweep(args) => {
            let (file, network_name) = load_network(&args.network, None)?;
            let direction = match args.ray {
                RayKind::Uniform => None,
                RayKind::File => {
                    let path = args
                        .ray_file
                        .as_ref()
                        .context("--ray file requires --ray-file")?;
                    Some(read_direction(path, file.tree.pq_count())?)
                }
            };
            let sweep = run_sweep(&file.tree, &file.scenario, direction, args.tol_lambda)?;
            std::fs::write(&args.out, sweep.to_csv())
                .with_context(|| format!("writing {}", args.out.display()))?;
            let mut spec = ScenarioSpec::new(network_name, Mode::Sweep);
            spec.tol_lambda = args.tol_lambda;
            write_sidecar(&args.out, &spec)?;
            println!(
                "lambda_star {} over {} recorded steps",
                sweep.trace.lambda_star,
                sweep.trace.steps.len()
            );
            Ok(())
        }
        Command::Ensemble(args) => {
            let (file, network_name) = load_network(&args.network, None)?;
            let mut spec = ScenarioSpec::new(network_name, Mode::RandomEnsemble);
            spec.count = args.count;
            spec.seed = args.seed;
            spec.tol_lambda = args.tol_lambda;
            let summary = run_random_ensemble(&file.tree, &file.scenario, &spec)?;
            if let Some(out) = &args.out {
                std::fs::write(out, summary.to_csv())
                    .with_context(|| format!("writing {}", out.display()))?;
                write_sidecar(out, &spec)?;
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&summary_stats(&summary))?
            );
            Ok(())
        }
        Command::Dg(args) => {
            let (file, network_name) = load_network(&args.network, None)?;
            let mut spec = ScenarioSpec::new(network_name, Mode::DgPenetration);
            spec.count = args.count;
            spec.seed = args.seed;
            spec.dg_fraction = args.dg_fraction;
            spec.power_factor = args.power_factor;
            spec.penetration_levels = parse_levels(&args.levels)?;
            let table = run_dg_penetration(&file.tree, &file.scenario, &spec)?;
            match &args.out {
                Some(out) => {
                    std::fs::write(out, table.to_csv())
                        .with_context(|| format!("writing {}", out.display()))?;
                    write_sidecar(out, &spec)?;
                }
                None => print!("{}", table.to_csv()),
            }
            Ok(())
        }
        Command::Uncertainty(args) => {
            let (file, network_name) = load_network(&args.network, None)?;
            let mut spec = ScenarioSpec::new(network_name, Mode::Uncertainty);
            spec.uncertainty_pct = args.pct;
            spec.tol_lambda = args.tol_lambda;
            let table = run_uncertainty(&file.tree, &file.scenario, &spec)?;
            match &args.out {
                Some(out) => {
                    std::fs::write(out, table.to_csv())
                        .with_context(|| format!("writing {}", out.display()))?;
                    write_sidecar(out, &spec)?;
                }
                None => print!("{}", table.to_csv()),
            }
            Ok(())
        }
        Command::Consensus(args) => run_consensus_cmd(args),
        Command::Hierarchy(args) => {
            let (file, _) = load_network(&args.network, None)?;
            let report = solve(&file, 1e-10, 200)?;
            let index = index_report(&file.tree, &file.scenario, &report.op);
            let text = std::fs::read_to_string(&args.partition)
                .with_context(|| format!("reading {}", args.partition.display()))?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let partition = PartitionNode::from_json(&value)?;
            let aggregate = hierarchical_aggregate(&partition, &index.h)?;
            emit_json(&aggregate, None)
        }
        Command::GenFeeder(args) => {
            let mut config = FeederConfig::new(args.buses, args.seed);
            config.chain_bias = args.chain_bias;
            let file = generate_feeder(&config);
            let text = emit_network(&file);
            match &args.out {
                Some(out) => std::fs::write(out, text)
                    .with_context(|| format!("writing {}", out.display()))?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Convert(args) => {
            let text = std::fs::read_to_string(&args.case)
                .with_context(|| format!("reading {}", args.case.display()))?;
            let file = parse_matpower(&text)?;
            let json = emit_network(&file);
            match &args.out {
                Some(out) => std::fs::write(out, json)
                    .with_context(|| format!("writing {}", out.display()))?,
                None => println!("{json}"),
            }
            Ok(())
        }
    }
}

#[derive(Deserialize)]
struct LoadsJson {
    v0: Option<f64>,
    #[serde(default)]
    buses: Vec<LoadEntry>,
}

#[derive(Deserialize)]
struct LoadEntry {
    id: BusId,
    #[serde(default)]
    p: f64,
    #[serde(default)]
    q: f64,
}

fn load_network(path: &Path, loads: Option<&Path>) -> Result<(NetworkFile, String)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut file = parse_network_file(&text)?;
    if let Some(loads_path) = loads {
        let loads_text = std::fs::read_to_string(loads_path)
            .with_context(|| format!("reading {}", loads_path.display()))?;
        let loads: LoadsJson = serde_json::from_str(&loads_text)?;
        let n = file.tree.pq_count();
        let mut scenario = LoadScenario::flat(n);
        scenario.v0 = loads.v0.unwrap_or(file.scenario.v0);
        for entry in loads.buses {
            if entry.id == 0 || entry.id > n {
                bail!("loads entry for unknown bus {}", entry.id);
            }
            scenario.p[entry.id - 1] = entry.p;
            scenario.q[entry.id - 1] = entry.q;
        }
        file.scenario = scenario;
    }
    Ok((file, path.display().to_string()))
}

fn solve(file: &NetworkFile, tol: f64, max_iter: usize) -> Result<SolveReport> {
    let report = vstab_core::solve_power_flow_with(
        &file.tree,
        &file.scenario,
        &SolverOptions {
            tol,
            max_iter,
            ..SolverOptions::default()
        },
    )?;
    Ok(report)
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn write_sidecar(out: &Path, spec: &ScenarioSpec) -> Result<()> {
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".spec.json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(spec)?)
        .with_context(|| format!("writing {}", PathBuf::from(&sidecar).display()))?;
    Ok(())
}

fn read_direction(path: &Path, n: usize) -> Result<ScenarioDirection> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let loads: LoadsJson = serde_json::from_str(&text)?;
    let mut direction = ScenarioDirection {
        dp: vec![0.0; n],
        dq: vec![0.0; n],
    };
    for entry in loads.buses {
        if entry.id == 0 || entry.id > n {
            bail!("direction entry for unknown bus {}", entry.id);
        }
        direction.dp[entry.id - 1] = entry.p;
        direction.dq[entry.id - 1] = entry.q;
    }
    Ok(direction)
}

fn parse_levels(spec: &str) -> Result<Vec<f64>> {
    let mut levels = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if let Some((lo, hi)) = part.split_once("..") {
            let lo: f64 = lo.trim().parse().context("bad level range start")?;
            let hi: f64 = hi.trim().parse().context("bad level range end")?;
            let mut level = lo;
            while level <= hi + 1e-9 {
                levels.push((level * 1e9).round() / 1e9);
                level += 0.1;
            }
        } else if !part.is_empty() {
            levels.push(part.parse().context("bad level value")?);
        }
    }
    if levels.is_empty() {
        bail!("no penetration levels given");
    }
    Ok(levels)
}

#[derive(serde::Serialize)]
struct EnsembleStats {
    scenarios: usize,
    failed: usize,
    vsi: vstab_core::experiments::ColumnStats,
    avsi: vstab_core::experiments::ColumnStats,
    error_pct: vstab_core::experiments::ColumnStats,
}

fn summary_stats(summary: &vstab_core::experiments::EnsembleSummary) -> EnsembleStats {
    EnsembleStats {
        scenarios: summary.rows.len(),
        failed: summary.failed,
        vsi: summary.vsi_stats,
        avsi: summary.avsi_stats,
        error_pct: summary.error_pct_stats,
    }
}

fn run_consensus_cmd(args: ConsensusArgs) -> Result<()> {
    let (file, _) = load_network(&args.network, None)?;
    let n = file.tree.pq_count();
    let report = solve(&file, 1e-10, 200)?;
    let index = index_report(&file.tree, &file.scenario, &report.op);
    if !index.nonpositive_terms.is_empty() {
        bail!(
            "cannot start consensus: nonpositive index terms at buses {:?}",
            index.nonpositive_terms
        );
    }

    let schedule = if let Some(schedule_path) = &args.schedule {
        let text = std::fs::read_to_string(schedule_path)
            .with_context(|| format!("reading {}", schedule_path.display()))?;
        let rounds: Vec<Vec<(BusId, BusId)>> = serde_json::from_str(&text)?;
        let graphs = rounds
            .iter()
            .map(|edges| bus_graph(n, edges))
            .collect::<Result<Vec<_>>>()?;
        ConsensusSchedule::Cycling(graphs)
    } else {
        let graph = match args.topology {
            Topology::Tree => CommGraph::from_tree(&file.tree),
            Topology::Complete => CommGraph::complete(n),
            Topology::Ring => CommGraph::ring(n),
            Topology::File => {
                let path = args
                    .graph_file
                    .as_ref()
                    .context("--topology file requires --graph-file")?;
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                #[derive(Deserialize)]
                struct GraphJson {
                    edges: Vec<(BusId, BusId)>,
                }
                let graph: GraphJson = serde_json::from_str(&text)?;
                bus_graph(n, &graph.edges)?
            }
        };
        ConsensusSchedule::Static(graph)
    };

    let trace = run_consensus(
        &schedule,
        &index.h,
        &ConsensusOptions {
            tol: args.tol,
            max_rounds: args.max_rounds,
            record_states: args.out.is_some(),
        },
    )?;

    if let Some(out) = &args.out {
        let mut csv = String::from("round,node,value\n");
        for (round, state) in trace.rounds.iter().enumerate() {
            for (node, value) in state.iter().enumerate() {
                csv.push_str(&format!("{},{},{}\n", round, node + 1, value));
            }
        }
        std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    }

    let centralized = index.avsi;
    #[derive(serde::Serialize)]
    struct ConsensusSummary {
        connected: bool,
        converged_round: Option<usize>,
        final_spread: f64,
        consensus_value: f64,
        centralized_avsi: Option<f64>,
    }
    let summary = ConsensusSummary {
        connected: trace.connected,
        converged_round: trace.converged_round,
        final_spread: *trace.spread.last().unwrap(),
        consensus_value: trace.final_state.iter().sum::<f64>() / n as f64,
        centralized_avsi: centralized,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn bus_graph(n: usize, edges: &[(BusId, BusId)]) -> Result<CommGraph> {
    let zero_based: Vec<(usize, usize)> = edges
        .iter()
        .map(|&(a, b)| {
            if a == 0 || b == 0 || a > n || b > n {
                bail!("communication edge ({a}, {b}) must join buses 1..={n}");
            }
            Ok((a - 1, b - 1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CommGraph::new(n, &zero_based)?)
}
