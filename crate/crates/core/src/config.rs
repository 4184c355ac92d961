//! Experiment configuration: a versioned TOML schema that bundles market,
//! target, grid and simulation settings, and its validation into runnable
//! [`Experiment`]s.
//!
//! ```toml
//! schema_version = 1
//!
//! [market]
//! risk_free = 0.0001
//! drift = [0.01, 0.05]
//! vols = [0.01, 0.2]            # or: covariance = [[...], [...]]
//! corr = [[1.0, -0.3], [-0.3, 1.0]]
//! leverage_cap = 1.0
//!
//! [target]
//! variant = "affine"            # or "tabulated" with knots = [[t, value], ...] and kappa
//! x0 = 100.0
//! required_return = 0.01
//! margin = 0.002
//! horizon = 10.0
//! evaluate_against = "nominal"  # statistics measured against the margin-free target
//!
//! [grid]
//! spacing = 0.5
//! extra_nodes = 5
//! time_steps = 60000
//! # checkpoint_every = 500     # optional: also keep every n-th solver row
//!
//! [sim]
//! paths = 10000
//! rebalance = "monthly"
//! seed = 42
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::checkpoint::fingerprint;
use crate::error::{Error, Result};
use crate::hjb::{solve_hjb, GridSpec, RowSelection, SolveReport, ValueSurface};
use crate::market::{MarketParams, TargetSpec};
use crate::sim::{simulate, Rebalance, SimConfig, SimStats};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub market: MarketBlock,
    pub target: TargetBlock,
    pub grid: GridBlock,
    pub sim: SimBlock,
    #[serde(default)]
    pub report: ReportBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketBlock {
    pub risk_free: f64,
    pub drift: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vols: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corr: Option<Vec<Vec<f64>>>,
    pub leverage_cap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetVariant {
    Affine,
    Tabulated,
}

/// Which schedule the simulation statistics are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluationTarget {
    /// The schedule without margin (`ε^M = 0`, `κ = 1`).
    #[default]
    Nominal,
    /// The schedule the HJB was solved for.
    Solve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetBlock {
    pub variant: TargetVariant,
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_return: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub evaluate_against: EvaluationTarget,
}

fn default_extra_nodes() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub spacing: f64,
    #[serde(default = "default_extra_nodes")]
    pub extra_nodes: usize,
    pub time_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<f64>,
    /// Keep every n-th solver row in addition to the rows the configured
    /// rebalance dates read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub paths: usize,
    pub rebalance: Rebalance,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportBlock {
    pub time_count: usize,
    pub wealth_count: usize,
}

impl Default for ReportBlock {
    fn default() -> Self {
        Self {
            time_count: 41,
            wealth_count: 121,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Validates every block and resolves the model objects.
    pub fn build(&self) -> Result<Experiment> {
        let market = self.market.build()?;
        let target = self.target.build()?;
        let eval_target = match self.target.evaluate_against {
            EvaluationTarget::Nominal => target.nominal(),
            EvaluationTarget::Solve => target.clone(),
        };
        let g = &self.grid;
        let grid = GridSpec::with_shape(
            g.spacing,
            g.extra_nodes,
            g.time_steps,
            g.shape.unwrap_or(0.5 * g.spacing),
        )
        .map_err(|e| field_err("grid", e))?;
        if g.checkpoint_every == Some(0) {
            return Err(Error::Config("grid.checkpoint_every: must be at least 1".into()));
        }
        if self.sim.paths < 2 {
            return Err(Error::Config("sim.paths: at least two paths are required".into()));
        }
        let sim = SimConfig {
            paths: self.sim.paths,
            rebalance: self.sim.rebalance,
            seed: self.sim.seed,
            antithetic: self.sim.antithetic,
            keep_terminal: false,
        };
        let fingerprint = fingerprint(&market, &target, &grid);
        Ok(Experiment {
            market,
            target,
            eval_target,
            grid,
            checkpoint_every: g.checkpoint_every,
            sim,
            report: self.report.clone(),
            fingerprint,
        })
    }
}

fn field_err(field: &str, e: Error) -> Error {
    match e {
        Error::InvalidInput(msg) => Error::Config(format!("{field}: {msg}")),
        other => Error::Config(format!("{field}: {other}")),
    }
}

fn square(field: &str, rows: &[Vec<f64>], m: usize) -> Result<DMatrix<f64>> {
    if rows.len() != m || rows.iter().any(|r| r.len() != m) {
        return Err(Error::Config(format!("{field}: expected a {m}x{m} matrix")));
    }
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

impl MarketBlock {
    pub fn build(&self) -> Result<MarketParams> {
        let m = self.drift.len();
        let params = match (&self.covariance, &self.vols, &self.corr) {
            (Some(cov), None, None) => MarketParams::new(
                self.risk_free,
                self.drift.clone(),
                square("market.covariance", cov, m)?,
                self.leverage_cap,
            ),
            (None, Some(vols), Some(corr)) => {
                if vols.len() != m {
                    return Err(Error::Config(format!(
                        "market.vols: {} volatilities for {m} assets",
                        vols.len()
                    )));
                }
                MarketParams::from_vols_corr(
                    self.risk_free,
                    self.drift.clone(),
                    vols,
                    &square("market.corr", corr, m)?,
                    self.leverage_cap,
                )
            }
            _ => {
                return Err(Error::Config(
                    "market: give either `covariance` or both `vols` and `corr`".into(),
                ))
            }
        };
        params.map_err(|e| field_err("market", e))
    }
}

impl TargetBlock {
    pub fn build(&self) -> Result<TargetSpec> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::Config(format!("target.{name}: required for this variant")))
        };
        let spec = match self.variant {
            TargetVariant::Affine => {
                if self.knots.is_some() || self.kappa.is_some() {
                    return Err(Error::Config(
                        "target: `knots`/`kappa` only apply to the tabulated variant".into(),
                    ));
                }
                TargetSpec::affine(
                    need(self.x0, "x0")?,
                    need(self.required_return, "required_return")?,
                    self.margin.unwrap_or(0.0),
                    self.horizon,
                )
            }
            TargetVariant::Tabulated => {
                if self.x0.is_some() || self.required_return.is_some() || self.margin.is_some() {
                    return Err(Error::Config(
                        "target: `x0`/`required_return`/`margin` only apply to the affine variant"
                            .into(),
                    ));
                }
                let knots = self
                    .knots
                    .as_ref()
                    .ok_or_else(|| Error::Config("target.knots: required for this variant".into()))?;
                TargetSpec::tabulated(
                    knots.iter().map(|k| (k[0], k[1])).collect(),
                    need(self.kappa, "kappa")?,
                    self.horizon,
                )
            }
        };
        spec.map_err(|e| field_err("target", e))
    }
}

/// A validated configuration, ready to solve and simulate.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub market: MarketParams,
    /// Target used in the HJB solve.
    pub target: TargetSpec,
    /// Target the simulation statistics are measured against.
    pub eval_target: TargetSpec,
    pub grid: GridSpec,
    pub checkpoint_every: Option<usize>,
    pub sim: SimConfig,
    pub report: ReportBlock,
    pub fingerprint: [u8; 32],
}

impl Experiment {
    pub fn fingerprint_hex(&self) -> String {
        hex::encode(self.fingerprint)
    }

    /// Rows needed to simulate with each of `frequencies`, plus the
    /// configured checkpoints.
    pub fn row_selection(&self, frequencies: &[Rebalance]) -> RowSelection {
        let horizon = self.target.horizon();
        let base = self
            .checkpoint_every
            .map(RowSelection::every)
            .unwrap_or_default();
        frequencies.iter().fold(base, |sel, f| {
            sel.with_times(&self.grid, horizon, f.dates(horizon))
        })
    }

    /// Solves, keeping the rows the configured rebalance frequency reads.
    pub fn solve(&self) -> Result<(ValueSurface, SolveReport)> {
        self.solve_keeping(&self.row_selection(&[self.sim.rebalance]))
    }

    pub fn solve_keeping(&self, rows: &RowSelection) -> Result<(ValueSurface, SolveReport)> {
        let (surface, report) = solve_hjb(&self.market, &self.target, &self.grid, rows)?;
        Ok((surface.with_fingerprint(self.fingerprint), report))
    }

    /// Simulates with the configured settings; the surface must carry this
    /// experiment's fingerprint.
    pub fn simulate(&self, surface: &ValueSurface) -> Result<SimStats> {
        self.simulate_with(surface, &self.sim)
    }

    pub fn simulate_with(&self, surface: &ValueSurface, sim: &SimConfig) -> Result<SimStats> {
        if surface.fingerprint() != &self.fingerprint {
            return Err(Error::Config(
                "surface was solved for a different configuration".into(),
            ));
        }
        simulate(&self.market, &self.eval_target, surface, sim)
    }
}
