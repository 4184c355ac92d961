//! Shared inputs for the criterion benchmarks.

use hjbfolio::presets;
use hjbfolio::sim::Rebalance;
use hjbfolio::Experiment;

/// Artificial preset, r̄ = 1%, ε^M = 0.2%, with `time_steps` over `horizon`.
pub fn artificial(cap: f64, horizon: f64, time_steps: usize) -> Experiment {
    let mut cfg = presets::artificial(0.01, 0.002, cap, horizon, Rebalance::Monthly);
    cfg.grid.time_steps = time_steps;
    cfg.build().expect("preset builds")
}

/// Values shaped like a mid-horizon row: `½(f − x)₊²` on the nodes.
pub fn quadratic_row(nodes: &[f64], level: f64) -> Vec<f64> {
    nodes
        .iter()
        .map(|x| 0.5 * (level - x).max(0.0).powi(2))
        .collect()
}
