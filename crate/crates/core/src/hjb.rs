//! Backward explicit time stepping of the HJB equation on an RBF collocation
//! grid.
//!
//! Each step fits the current node values, minimizes the generator at every
//! node (one small QP per node, run in parallel), fits the resulting
//! Hamiltonian on the same centers and takes an explicit Euler step backward
//! in time. The left node is then overwritten with the closed-form value at
//! zero wealth and every node at or beyond `x*` with zero.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{MarketModel, TargetSpec};
use crate::qp::{solve_qp, QpProblem};
use crate::rbf::{Interpolant, NodeSet};

/// Collocation grid: equispaced nodes `xᵢ = i·h_x` from zero past `x*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub spacing: f64,
    pub extra_nodes: usize,
    pub time_steps: usize,
    pub shape: f64,
}

impl GridSpec {
    /// Grid with the default shape parameter `ε = h_x / 2`.
    pub fn new(spacing: f64, extra_nodes: usize, time_steps: usize) -> Result<Self> {
        Self::with_shape(spacing, extra_nodes, time_steps, 0.5 * spacing)
    }

    pub fn with_shape(
        spacing: f64,
        extra_nodes: usize,
        time_steps: usize,
        shape: f64,
    ) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidInput(format!("node spacing must be positive, got {spacing}")));
        }
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::InvalidInput(format!("shape must be positive, got {shape}")));
        }
        if time_steps == 0 {
            return Err(Error::InvalidInput("at least one time step is required".into()));
        }
        Ok(Self {
            spacing,
            extra_nodes,
            time_steps,
            shape,
        })
    }

    /// Index of the first node at or beyond `x*`, plus `extra_nodes` more.
    pub fn node_count(&self, x_star: f64) -> usize {
        let boundary = (x_star / self.spacing - 1e-9).ceil().max(0.0) as usize;
        boundary + 1 + self.extra_nodes
    }

    pub fn nodes(&self, x_star: f64) -> Vec<f64> {
        (0..self.node_count(x_star))
            .map(|i| i as f64 * self.spacing)
            .collect()
    }

    pub fn time_step(&self, horizon: f64) -> f64 {
        horizon / self.time_steps as f64
    }

    pub fn time_at(&self, horizon: f64, step: usize) -> f64 {
        if step == self.time_steps {
            horizon
        } else {
            step as f64 * horizon / self.time_steps as f64
        }
    }

    /// Largest step `k` with `t_k ≤ t` (up to round-off), capped at `M`.
    pub fn step_at_or_before(&self, horizon: f64, t: f64) -> usize {
        let k = ((t.max(0.0) / self.time_step(horizon)) + 1e-9).floor() as usize;
        k.min(self.time_steps)
    }
}

/// Which solver rows a solve keeps. Rows `0` and `M` are always kept.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RowSelection {
    every: Option<usize>,
    steps: BTreeSet<usize>,
}

impl RowSelection {
    pub fn all() -> Self {
        Self::every(1)
    }

    pub fn every(n: usize) -> Self {
        Self {
            every: Some(n.max(1)),
            steps: BTreeSet::new(),
        }
    }

    /// Also keep the row a policy query at each of `times` will read.
    pub fn with_times<I>(mut self, grid: &GridSpec, horizon: f64, times: I) -> Self
    where
        I: IntoIterator<Item = f64>,
    {
        self.steps
            .extend(times.into_iter().map(|t| grid.step_at_or_before(horizon, t)));
        self
    }

    pub fn keeps(&self, k: usize, m: usize) -> bool {
        k == 0 || k == m || self.every.is_some_and(|n| k % n == 0) || self.steps.contains(&k)
    }
}

/// `x ≥ x*` up to round-off in how `x*` was computed.
#[inline]
pub(crate) fn at_or_beyond(x: f64, x_star: f64) -> bool {
    x >= x_star - 1e-12 * x_star.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredRow {
    pub step: usize,
    pub time: f64,
    pub values: Vec<f64>,
}

/// Node values of the solved value function at the stored time steps.
#[derive(Debug, Clone)]
pub struct ValueSurface {
    grid: GridSpec,
    horizon: f64,
    x_star: f64,
    fingerprint: [u8; 32],
    rows: Vec<StoredRow>,
    node_set: Arc<NodeSet>,
}

impl ValueSurface {
    /// Reassembles a surface from stored rows, e.g. after loading a checkpoint.
    pub fn from_rows(
        grid: GridSpec,
        horizon: f64,
        x_star: f64,
        fingerprint: [u8; 32],
        rows: Vec<StoredRow>,
    ) -> Result<Self> {
        let node_set = Arc::new(NodeSet::new(grid.nodes(x_star), grid.shape)?);
        Self::with_node_set(grid, horizon, x_star, fingerprint, rows, node_set)
    }

    fn with_node_set(
        grid: GridSpec,
        horizon: f64,
        x_star: f64,
        fingerprint: [u8; 32],
        rows: Vec<StoredRow>,
        node_set: Arc<NodeSet>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("surface has no stored rows".into()));
        }
        if rows.windows(2).any(|w| w[1].step <= w[0].step) {
            return Err(Error::InvalidInput("stored rows must be sorted by step".into()));
        }
        if rows.iter().any(|r| r.values.len() != node_set.len() || r.step > grid.time_steps) {
            return Err(Error::InvalidInput("stored row does not match the grid".into()));
        }
        Ok(Self {
            grid,
            horizon,
            x_star,
            fingerprint,
            rows,
            node_set,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn x_star(&self) -> f64 {
        self.x_star
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn with_fingerprint(mut self, fingerprint: [u8; 32]) -> Self {
        self.fingerprint = fingerprint;
        self
    }

    pub fn nodes(&self) -> &[f64] {
        self.node_set.centers()
    }

    pub fn node_set(&self) -> &NodeSet {
        &self.node_set
    }

    pub fn rows(&self) -> &[StoredRow] {
        &self.rows
    }

    pub fn time_step(&self) -> f64 {
        self.grid.time_step(self.horizon)
    }

    /// Largest node coordinate; queries are clamped to `[0, x_max]`.
    pub fn x_max(&self) -> f64 {
        *self.nodes().last().expect("node set is non-empty")
    }

    /// Stored row with the largest `t_k ≤ t`.
    pub fn row_at_or_before(&self, t: f64) -> Result<&StoredRow> {
        let slack = 1e-12 * self.horizon.max(1.0);
        if !(t >= -slack && t <= self.horizon + slack) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        let k = self.grid.step_at_or_before(self.horizon, t);
        let idx = self.rows.partition_point(|r| r.step <= k);
        if idx == 0 {
            return Err(Error::Config(format!("no stored surface row at or before t = {t}")));
        }
        Ok(&self.rows[idx - 1])
    }

    pub fn interpolant(&self, row: &StoredRow) -> Result<Interpolant> {
        self.node_set.fit(&row.values)
    }

    /// `v^h(t, x)` using the stored row at or before `t`.
    pub fn value(&self, t: f64, x: f64) -> Result<f64> {
        let row = self.row_at_or_before(t)?;
        let x = x.clamp(0.0, self.x_max());
        if at_or_beyond(x, self.x_star) {
            return Ok(0.0);
        }
        Ok(self.interpolant(row)?.eval(x))
    }
}

/// Curvature range over the nodes strictly below `x*` at one stored step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureRange {
    pub step: usize,
    pub time: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub node_count: usize,
    pub time_steps: usize,
    pub condition_estimate: f64,
    pub condition_warning: bool,
    /// Node solves below `x*` where a negative `∂xx v^h` was clamped to zero.
    pub curvature_clamps: u64,
    pub curvature: Vec<CurvatureRange>,
    /// `∂xx v^h` at every node at `t = 0`.
    pub initial_curvature: Vec<f64>,
    /// Sign changes of `∂xx v^h` at `t = 0` over the last five nodes below `x*`.
    pub boundary_sign_changes: usize,
    pub wall_time_secs: f64,
}

impl SolveReport {
    pub fn boundary_oscillation(&self) -> bool {
        self.boundary_sign_changes > 0
    }
}

/// `½(f(T) − xᵢ)₊²`, exactly zero at and beyond `x*`.
pub fn terminal_values(spec: &TargetSpec, nodes: &[f64]) -> Vec<f64> {
    let f_end = spec.eval_unchecked(spec.horizon());
    let x_star = spec.x_star();
    nodes
        .iter()
        .map(|&x| {
            if at_or_beyond(x, x_star) {
                0.0
            } else {
                let s = (f_end - x).max(0.0);
                0.5 * s * s
            }
        })
        .collect()
}

/// Output of the per-node generator minimization.
#[derive(Debug, Clone)]
pub struct NodeHamiltonian {
    pub values: Vec<f64>,
    pub minimizers: Vec<DVector<f64>>,
    pub curvature: Vec<f64>,
    /// Nodes strictly inside `(0, x*)` whose curvature was clamped.
    pub clamps: u64,
}

/// `H̃ᵢ = min_π L^π I(xᵢ)` at every node, where
/// `L^π φ = (r + (b − r1)ᵀπ)·x·φ' + ½x²·πᵀΣπ·φ'' + (1/2T)(f(t) − x)₊²`.
pub fn hamiltonian_nodes<M: MarketModel + ?Sized>(
    node_set: &NodeSet,
    interp: &Interpolant,
    t: f64,
    market: &M,
    spec: &TargetSpec,
    step: usize,
) -> Result<NodeHamiltonian> {
    let params = market.params_at(t);
    let params = params.as_ref();
    let (d1, d2) = node_set.derivatives_at_nodes(interp);
    let f_t = spec.eval_unchecked(t);
    let x_star = spec.x_star();
    let inv_2t = 0.5 / spec.horizon();
    let r = params.risk_free();
    let nodes = node_set.centers();

    let solved: Vec<(f64, DVector<f64>, bool)> = (0..nodes.len())
        .into_par_iter()
        .map(|i| {
            let x = nodes[i];
            let problem = QpProblem::hamiltonian(x, d1[i], d2[i], params);
            let sol = solve_qp(&problem).map_err(|e| Error::NodeQp {
                step,
                node: i,
                source: Box::new(e),
            })?;
            let shortfall = (f_t - x).max(0.0);
            let h = r * x * d1[i] + sol.objective + inv_2t * shortfall * shortfall;
            let counted = problem.curvature_clamped && x > 0.0 && !at_or_beyond(x, x_star);
            Ok((h, sol.weights, counted))
        })
        .collect::<Result<_>>()?;

    let mut values = Vec::with_capacity(solved.len());
    let mut minimizers = Vec::with_capacity(solved.len());
    let mut clamps = 0;
    for (h, w, c) in solved {
        values.push(h);
        minimizers.push(w);
        clamps += c as u64;
    }
    Ok(NodeHamiltonian {
        values,
        minimizers,
        curvature: d2,
        clamps,
    })
}

/// Explicit backward stepper bound to one problem instance.
pub struct BackwardStepper<'a, M: MarketModel + ?Sized> {
    market: &'a M,
    spec: &'a TargetSpec,
    grid: GridSpec,
    node_set: Arc<NodeSet>,
    x_star: f64,
    blowup_limit: f64,
}

/// Result of one backward step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub values: Vec<f64>,
    pub hamiltonian: NodeHamiltonian,
}

impl<'a, M: MarketModel + ?Sized> BackwardStepper<'a, M> {
    pub fn new(market: &'a M, spec: &'a TargetSpec, grid: GridSpec) -> Result<Self> {
        let x_star = spec.x_star();
        let node_set = Arc::new(NodeSet::new(grid.nodes(x_star), grid.shape)?);
        let blowup_limit = 1e6 * (1.0 + spec.boundary_left_value(0.0)?);
        Ok(Self {
            market,
            spec,
            grid,
            node_set,
            x_star,
            blowup_limit,
        })
    }

    pub fn node_set(&self) -> &NodeSet {
        &self.node_set
    }

    pub fn terminal_row(&self) -> Vec<f64> {
        terminal_values(self.spec, self.node_set.centers())
    }

    /// Maps row `k` to row `k − 1` (`1 ≤ k ≤ M`).
    pub fn step(&self, k: usize, row: &[f64]) -> Result<StepOutput> {
        if k == 0 || k > self.grid.time_steps {
            return Err(Error::InvalidInput(format!(
                "step index {k} outside 1..={}",
                self.grid.time_steps
            )));
        }
        let horizon = self.spec.horizon();
        let t_k = self.grid.time_at(horizon, k);
        let t_prev = self.grid.time_at(horizon, k - 1);
        let h = self.grid.time_step(horizon);

        let value_fit = self.node_set.fit(row)?;
        let ham = hamiltonian_nodes(&self.node_set, &value_fit, t_k, self.market, self.spec, k)?;
        // Step 5's fit is not needed for the update, but a Hamiltonian row the
        // Gram system cannot represent means the step has blown up.
        self.node_set.fit(&ham.values).map_err(|_| Error::BlowUp {
            step: k,
            node: first_non_finite(&ham.values).unwrap_or(0),
            value: f64::NAN,
        })?;

        // V(t − h) = V(t) + h·min_π L^π V(t), since ∂ₜV + min_π L^π V = 0.
        // Both interpolants reproduce their data at the nodes, so the nodal
        // values are used directly; re-evaluating the fits would feed the
        // solve residual back into every step.
        let mut next: Vec<f64> = row
            .iter()
            .zip(&ham.values)
            .map(|(v, hv)| v + h * hv)
            .collect();

        next[0] = self.spec.boundary_left_value(t_prev)?;
        for (x, v) in self.node_set.centers().iter().zip(next.iter_mut()) {
            if at_or_beyond(*x, self.x_star) {
                *v = 0.0;
            }
        }
        if let Some((node, value)) = next
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > self.blowup_limit)
            .map(|(i, v)| (i, *v))
        {
            return Err(Error::BlowUp { step: k, node, value });
        }
        Ok(StepOutput {
            values: next,
            hamiltonian: ham,
        })
    }
}

fn first_non_finite(v: &[f64]) -> Option<usize> {
    v.iter().position(|x| !x.is_finite())
}

fn curvature_range(nodes: &[f64], d2: &[f64], x_star: f64) -> (f64, f64) {
    nodes
        .iter()
        .zip(d2)
        .filter(|(x, _)| !at_or_beyond(**x, x_star))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, v)| {
            (lo.min(*v), hi.max(*v))
        })
}

/// Sign changes of `d2` over the last `window` nodes in `(0, x*)`.
pub fn boundary_sign_changes(nodes: &[f64], d2: &[f64], x_star: f64, window: usize) -> usize {
    let inside: Vec<f64> = nodes
        .iter()
        .zip(d2)
        .filter(|(x, _)| **x > 0.0 && !at_or_beyond(**x, x_star))
        .map(|(_, v)| *v)
        .collect();
    let tail = &inside[inside.len().saturating_sub(window)..];
    tail.iter()
        .filter(|v| **v != 0.0)
        .collect::<Vec<_>>()
        .windows(2)
        .filter(|w| w[0].signum() != w[1].signum())
        .count()
}

/// Runs the full backward solve from `T` to `0`, storing the rows `keep` selects.
pub fn solve_hjb<M: MarketModel + ?Sized>(
    market: &M,
    spec: &TargetSpec,
    grid: &GridSpec,
    keep: &RowSelection,
) -> Result<(ValueSurface, SolveReport)> {
    let started = Instant::now();
    let stepper = BackwardStepper::new(market, spec, *grid)?;
    let horizon = spec.horizon();
    let m = grid.time_steps;
    let keep = |k: usize| keep.keeps(k, m);

    let mut row = stepper.terminal_row();
    let mut stored = vec![StoredRow {
        step: m,
        time: horizon,
        values: row.clone(),
    }];
    let mut ranges = Vec::new();
    let mut clamps = 0u64;
    let nodes = stepper.node_set().centers().to_vec();

    for k in (1..=m).rev() {
        let out = stepper.step(k, &row)?;
        clamps += out.hamiltonian.clamps;
        if keep(k) {
            let (lo, hi) = curvature_range(&nodes, &out.hamiltonian.curvature, stepper.x_star);
            ranges.push(CurvatureRange {
                step: k,
                time: grid.time_at(horizon, k),
                min: lo,
                max: hi,
            });
        }
        row = out.values;
        if keep(k - 1) {
            stored.push(StoredRow {
                step: k - 1,
                time: grid.time_at(horizon, k - 1),
                values: row.clone(),
            });
        }
    }

    let final_fit = stepper.node_set().fit(&row)?;
    let (_, initial_curvature) = stepper.node_set().derivatives_at_nodes(&final_fit);
    let (lo, hi) = curvature_range(&nodes, &initial_curvature, stepper.x_star);
    ranges.push(CurvatureRange {
        step: 0,
        time: 0.0,
        min: lo,
        max: hi,
    });
    stored.reverse();
    ranges.reverse();

    let node_set = Arc::clone(&stepper.node_set);
    let report = SolveReport {
        node_count: nodes.len(),
        time_steps: m,
        condition_estimate: node_set.condition(),
        condition_warning: node_set.condition_warning(),
        curvature_clamps: clamps,
        curvature: ranges,
        boundary_sign_changes: boundary_sign_changes(
            &nodes,
            &initial_curvature,
            stepper.x_star,
            5,
        ),
        initial_curvature,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let surface = ValueSurface::with_node_set(
        *grid,
        horizon,
        stepper.x_star,
        [0; 32],
        stored,
        node_set,
    )?;
    Ok((surface, report))
}
