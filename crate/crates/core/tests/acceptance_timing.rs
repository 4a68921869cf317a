//! Acceptance criterion 09, isolated in its own process: wall-clock scaling
//! measurements need the machine to themselves, and cargo runs test binaries
//! sequentially.

use vstab_core::experiments::{log_log_slope, measure_index_scaling};

#[test]
fn criterion_09_complexity_scaling() {
    let rows = measure_index_scaling(&[100, 200, 400, 800], 909);
    let avsi_points: Vec<(usize, f64)> = rows.iter().map(|r| (r.n, r.avsi_seconds)).collect();
    let vsi_points: Vec<(usize, f64)> = rows.iter().map(|r| (r.n, r.vsi_seconds)).collect();
    let avsi_slope = log_log_slope(&avsi_points);
    let vsi_slope = log_log_slope(&vsi_points);
    assert!(
        (0.7..=1.3).contains(&avsi_slope),
        "approximate-index slope {avsi_slope} outside [0.7, 1.3]; rows {rows:?}"
    );
    assert!(
        (2.5..=3.5).contains(&vsi_slope),
        "log-det index slope {vsi_slope} outside [2.5, 3.5]; rows {rows:?}"
    );
    println!(
        "criterion 09 complexity scaling (avsi slope {avsi_slope:.2}, vsi slope {vsi_slope:.2}): PASS"
    );
}
