//! Constrained target-tracking portfolio optimization.
//!
//! The investor minimizes the lower mean square error between wealth and a
//! deterministic target `f(t)` under no-short-selling and a leverage cap. The
//! HJB equation of that problem is solved backward in time with multiquadric
//! RBF collocation ([`hjb`]), the optimal weights are read off the solved
//! value surface ([`policy`]), and the resulting strategy is evaluated by
//! Monte Carlo simulation ([`sim`]).
//!
//! ```no_run
//! use hjbfolio::presets;
//! use hjbfolio::sim::Rebalance;
//!
//! let exp = presets::artificial(0.01, 0.002, 1.0, 10.0, Rebalance::Monthly)
//!     .build()
//!     .unwrap();
//! let (surface, _report) = exp.solve().unwrap();
//! let stats = exp.simulate(&surface).unwrap();
//! println!("{}", stats.summary());
//! ```

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod hjb;
pub mod market;
pub mod policy;
pub mod presets;
pub mod qp;
pub mod rbf;
pub mod sim;

pub use config::{Experiment, ExperimentConfig};
pub use error::{Error, Result};
pub use hjb::{solve_hjb, GridSpec, RowSelection, SolveReport, ValueSurface};
pub use market::{MarketModel, MarketParams, TargetKind, TargetSpec};
pub use policy::{optimal_weights, weight_grid, PolicySlice, WeightGrid};
pub use qp::{solve_qp, QpProblem, QpSolution, QpStatus};
pub use rbf::{Interpolant, Multiquadric, NodeSet};
pub use sim::{simulate, simulate_with, Rebalance, SimConfig, SimStats, SimSummary};
