//! Converter for MATPOWER-style case files restricted to radial topologies.
//!
//! Reads `mpc.baseMVA`, `mpc.bus` (columns BUS_I, TYPE, PD, QD in MW/MVAr) and
//! `mpc.branch` (columns F_BUS, T_BUS, BR_R, BR_X, already per-unit). The
//! slack bus (TYPE 3) becomes bus 0, the remaining buses are renumbered in
//! ascending order of their original ids, and branches are oriented away from
//! the slack. Meshed cases are rejected.

use super::{GridError, Line, LoadScenario, NetworkFile, NetworkTree};
use std::collections::HashMap;

/// Parse a MATPOWER case into the internal network representation.
pub fn parse_matpower(text: &str) -> Result<NetworkFile, GridError> {
    let base_mva = scalar_field(text, "baseMVA")?;
    if !(base_mva > 0.0) {
        return Err(GridError::MalformedFile(format!(
            "baseMVA must be positive, got {base_mva}"
        )));
    }
    let bus_rows = matrix_field(text, "bus")?;
    let branch_rows = matrix_field(text, "branch")?;

    let mut slack: Option<u64> = None;
    let mut pq_ids: Vec<u64> = Vec::new();
    let mut demand: HashMap<u64, (f64, f64)> = HashMap::new();
    for row in &bus_rows {
        if row.len() < 4 {
            return Err(GridError::MalformedFile(
                "bus row needs at least BUS_I, TYPE, PD, QD".into(),
            ));
        }
        let id = row[0] as u64;
        let bus_type = row[1] as i64;
        match bus_type {
            3 => {
                if slack.replace(id).is_some() {
                    return Err(GridError::MalformedFile(
                        "more than one slack bus (TYPE 3)".into(),
                    ));
                }
            }
            1 => pq_ids.push(id),
            other => {
                return Err(GridError::MalformedFile(format!(
                    "unsupported bus TYPE {other} at bus {id} (only PQ and slack)"
                )));
            }
        }
        demand.insert(id, (row[2] / base_mva, row[3] / base_mva));
    }
    let slack = slack.ok_or_else(|| GridError::MalformedFile("no slack bus (TYPE 3)".into()))?;

    pq_ids.sort_unstable();
    pq_ids.dedup();
    let n = pq_ids.len();
    let mut renumber: HashMap<u64, usize> = HashMap::new();
    renumber.insert(slack, 0);
    for (k, &id) in pq_ids.iter().enumerate() {
        renumber.insert(id, k + 1);
    }

    if branch_rows.len() != n {
        return Err(GridError::NotATree(format!(
            "{} branches for {} PQ buses: not radial",
            branch_rows.len(),
            n
        )));
    }

    // Undirected adjacency, then orient away from the slack.
    let mut adjacency = vec![Vec::new(); n + 1];
    for row in &branch_rows {
        if row.len() < 4 {
            return Err(GridError::MalformedFile(
                "branch row needs at least F_BUS, T_BUS, BR_R, BR_X".into(),
            ));
        }
        let from = *renumber.get(&(row[0] as u64)).ok_or_else(|| {
            GridError::MalformedFile(format!("branch references unknown bus {}", row[0]))
        })?;
        let to = *renumber.get(&(row[1] as u64)).ok_or_else(|| {
            GridError::MalformedFile(format!("branch references unknown bus {}", row[1]))
        })?;
        adjacency[from].push((to, row[2], row[3]));
        adjacency[to].push((from, row[2], row[3]));
    }

    let mut lines = Vec::with_capacity(n);
    let mut visited = vec![false; n + 1];
    visited[0] = true;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(bus) = queue.pop_front() {
        for &(next, r, x) in &adjacency[bus] {
            if visited[next] {
                continue;
            }
            visited[next] = true;
            lines.push(Line {
                parent: bus,
                child: next,
                r,
                x,
            });
            queue.push_back(next);
        }
    }
    if visited.iter().any(|&v| !v) {
        return Err(GridError::NotATree(
            "branch graph is disconnected or meshed".into(),
        ));
    }

    let tree = NetworkTree::new(lines)?;
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for (&orig, &(pd, qd)) in &demand {
        let new_id = renumber[&orig];
        if new_id > 0 {
            p[new_id - 1] = pd;
            q[new_id - 1] = qd;
        }
    }
    Ok(NetworkFile {
        tree,
        scenario: LoadScenario::new(1.0, p, q),
    })
}

fn scalar_field(text: &str, name: &str) -> Result<f64, GridError> {
    let key = format!("mpc.{name}");
    let start = text
        .find(&key)
        .ok_or_else(|| GridError::MalformedFile(format!("missing {key}")))?;
    let rest = &text[start + key.len()..];
    let rest = rest
        .trim_start()
        .strip_prefix('=')
        .ok_or_else(|| GridError::MalformedFile(format!("expected '=' after {key}")))?;
    let end = rest.find(';').unwrap_or(rest.len());
    rest[..end]
        .trim()
        .parse()
        .map_err(|_| GridError::MalformedFile(format!("cannot parse {key}")))
}

fn matrix_field(text: &str, name: &str) -> Result<Vec<Vec<f64>>, GridError> {
    let key = format!("mpc.{name}");
    let start = text
        .find(&format!("{key} = ["))
        .or_else(|| text.find(&format!("{key}=[")))
        .ok_or_else(|| GridError::MalformedFile(format!("missing {key} matrix")))?;
    let open = text[start..].find('[').unwrap() + start;
    let close = text[open..]
        .find(']')
        .ok_or_else(|| GridError::MalformedFile(format!("unterminated {key} matrix")))?
        + open;
    let body = &text[open + 1..close];
    let mut rows = Vec::new();
    for raw_line in body.lines() {
        let line = raw_line.split('%').next().unwrap_or("");
        for stmt in line.split(';') {
            let stmt = stmt.trim();
            if stmt.is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = stmt
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|tok| !tok.is_empty())
                .map(str::parse::<f64>)
                .collect();
            match row {
                Ok(values) if !values.is_empty() => rows.push(values),
                Ok(_) => {}
                Err(_) => {
                    return Err(GridError::MalformedFile(format!(
                        "cannot parse row of {key}: '{stmt}'"
                    )))
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(GridError::MalformedFile(format!("{key} matrix is empty")));
    }
    Ok(rows)
}
