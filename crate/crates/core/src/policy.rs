//! Optimal portfolio weights read off a solved value surface.

use std::io::{BufRead, Write};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::hjb::{at_or_beyond, StoredRow, ValueSurface};
use crate::market::{MarketModel, MarketParams};
use crate::qp::{solve_qp, QpProblem};
use crate::rbf::Interpolant;

/// The surface frozen at one stored time step, ready for repeated wealth queries.
#[derive(Debug, Clone)]
pub struct PolicySlice<'a> {
    surface: &'a ValueSurface,
    row: &'a StoredRow,
    interp: Interpolant,
}

impl<'a> PolicySlice<'a> {
    pub fn new(surface: &'a ValueSurface, t: f64) -> Result<Self> {
        let row = surface.row_at_or_before(t)?;
        let interp = surface.interpolant(row)?;
        Ok(Self {
            surface,
            row,
            interp,
        })
    }

    /// Time of the stored row in use.
    pub fn row_time(&self) -> f64 {
        self.row.time
    }

    /// Minimizer of the generator at wealth `x`. Zero at `x = 0` and for `x ≥ x*`.
    pub fn weights(&self, params: &MarketParams, x: f64) -> Result<DVector<f64>> {
        if x.is_nan() {
            return Err(Error::InvalidInput("wealth query is NaN".into()));
        }
        let m = params.num_assets();
        let x = x.clamp(0.0, self.surface.x_max());
        if x <= 0.0 || at_or_beyond(x, self.surface.x_star()) {
            return Ok(DVector::zeros(m));
        }
        let (v_x, v_xx) = self.interp.eval_derivatives(x);
        let problem = QpProblem::hamiltonian(x, v_x, v_xx, params);
        let mut w = solve_qp(&problem)?.weights;
        // Enforce the admissible set exactly rather than to solver tolerance.
        w.iter_mut().for_each(|v| *v = v.max(0.0));
        let total = w.sum();
        let cap = params.leverage_cap();
        if total > cap {
            w *= cap / total;
        }
        Ok(w)
    }
}

/// `π*(t, x)` from the stored row at or before `t`.
pub fn optimal_weights<M: MarketModel + ?Sized>(
    surface: &ValueSurface,
    market: &M,
    t: f64,
    x: f64,
) -> Result<DVector<f64>> {
    let slice = PolicySlice::new(surface, t)?;
    slice.weights(market.params_at(t).as_ref(), x)
}

/// Optimal weights on a dense `(t, x)` lattice, stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrid {
    pub times: Vec<f64>,
    pub wealths: Vec<f64>,
    pub num_assets: usize,
    /// `weights[(i·wealths.len() + j)·m + a]` is asset `a` at `(times[i], wealths[j])`.
    pub weights: Vec<f64>,
}

impl WeightGrid {
    pub fn at(&self, ti: usize, xi: usize) -> &[f64] {
        let m = self.num_assets;
        let off = (ti * self.wealths.len() + xi) * m;
        &self.weights[off..off + m]
    }

    /// CSV with columns `t, x, pi_1..pi_m, leverage`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = String::from("t,x");
        for a in 1..=self.num_assets {
            header.push_str(&format!(",pi_{a}"));
        }
        header.push_str(",leverage");
        writeln!(out, "{header}")?;
        for (i, t) in self.times.iter().enumerate() {
            for (j, x) in self.wealths.iter().enumerate() {
                let w = self.at(i, j);
                let mut line = format!("{t},{x}");
                for v in w {
                    line.push_str(&format!(",{v}"));
                }
                line.push_str(&format!(",{}", w.iter().sum::<f64>()));
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty weight grid".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 4 || cols[0] != "t" || cols[1] != "x" || cols[cols.len() - 1] != "leverage"
        {
            return Err(Error::Format(format!("unexpected weight grid header: {header}")));
        }
        let m = cols.len() - 3;
        let mut times: Vec<f64> = Vec::new();
        let mut wealths: Vec<f64> = Vec::new();
        let mut weights = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("bad number in weight grid: {e}")))?;
            if vals.len() != m + 3 {
                return Err(Error::Format(format!("weight grid row has {} columns", vals.len())));
            }
            if times.last() != Some(&vals[0]) {
                times.push(vals[0]);
            }
            if times.len() == 1 {
                wealths.push(vals[1]);
            }
            weights.extend_from_slice(&vals[2..2 + m]);
        }
        if weights.len() != times.len() * wealths.len() * m {
            return Err(Error::Format("weight grid is not a full lattice".into()));
        }
        Ok(Self {
            times,
            wealths,
            num_assets: m,
            weights,
        })
    }
}

/// Evaluates the policy on the given axes.
pub fn weight_grid_on<M: MarketModel + ?Sized>(
    surface: &ValueSurface,
    market: &M,
    times: &[f64],
    wealths: &[f64],
) -> Result<WeightGrid> {
    let m = market.num_assets();
    let mut weights = Vec::with_capacity(times.len() * wealths.len() * m);
    for &t in times {
        let slice = PolicySlice::new(surface, t)?;
        let params = market.params_at(t);
        for &x in wealths {
            weights.extend(slice.weights(params.as_ref(), x)?.iter());
        }
    }
    Ok(WeightGrid {
        times: times.to_vec(),
        wealths: wealths.to_vec(),
        num_assets: m,
        weights,
    })
}

/// Evaluates the policy on an evenly spaced lattice over `[0, T] × [0, x_max]`.
pub fn weight_grid<M: MarketModel + ?Sized>(
    surface: &ValueSurface,
    market: &M,
    time_count: usize,
    wealth_count: usize,
) -> Result<WeightGrid> {
    let times = linspace(0.0, surface.horizon(), time_count);
    let wealths = linspace(0.0, surface.x_max(), wealth_count);
    weight_grid_on(surface, market, &times, &wealths)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}
