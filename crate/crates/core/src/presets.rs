//! Ready-made experiment configurations.
//!
//! Two markets ship with the crate: a two-asset artificial market (low-risk
//! and high-risk asset, negatively correlated) and a four-asset market of
//! Japanese and foreign bond and stock indices paired with a pension fund's
//! projected income/expense schedule. Each table preset bundles the rows of
//! one comparison together with the statistics it is expected to reproduce.

use nalgebra::DMatrix;

use crate::config::{
    EvaluationTarget, ExperimentConfig, GridBlock, MarketBlock, ReportBlock, SimBlock,
    TargetBlock, TargetVariant, SCHEMA_VERSION,
};
use crate::error::Result;
use crate::market::MarketParams;
use crate::sim::Rebalance;

pub const DESK_PATHS: usize = 10_000;
pub const DEFAULT_SEED: u64 = 42;
/// Solver steps per month of horizon for the artificial market.
pub const STEPS_PER_MONTH: usize = 500;
/// Solver steps per month of horizon for the empirical market.
pub const EMPIRICAL_STEPS_PER_MONTH: usize = 50;

/// Projected `(t, B(t), C(t))` in billions of yen, fiscal years 2040–2055.
/// `B(0) − C(0)` is 5.293 from these figures (occasionally quoted as 5.292).
pub const PENSION_TABLE: [(f64, f64, f64); 16] = [
    (0.0, 67.286, 61.993),
    (1.0, 69.053, 62.808),
    (2.0, 70.718, 63.611),
    (3.0, 72.329, 64.405),
    (4.0, 73.887, 65.193),
    (5.0, 75.374, 65.978),
    (6.0, 76.803, 66.766),
    (7.0, 78.246, 67.569),
    (8.0, 79.761, 68.393),
    (9.0, 81.331, 69.241),
    (10.0, 82.893, 70.112),
    (11.0, 84.437, 70.996),
    (12.0, 85.940, 71.878),
    (13.0, 87.432, 72.759),
    (14.0, 88.909, 73.632),
    (15.0, 90.322, 74.490),
];

const ART_RISK_FREE: f64 = 0.0001;
const ART_DRIFT: [f64; 2] = [0.01, 0.05];
const ART_VOLS: [f64; 2] = [0.01, 0.20];
const ART_RHO: f64 = -0.3;

const EMP_RISK_FREE: f64 = 0.00001;
const EMP_DRIFT: [f64; 4] = [0.03, 0.048, 0.035, 0.05];
const EMP_COV_E4: [[f64; 4]; 4] = [
    [29.7, 18.2, -4.39, -5.41],
    [18.2, 495.0, -77.8, 119.0],
    [-4.39, -77.8, 181.0, 147.0],
    [-5.41, 119.0, 147.0, 394.0],
];

pub fn artificial_market(leverage_cap: f64) -> Result<MarketParams> {
    let corr = DMatrix::from_row_slice(2, 2, &[1.0, ART_RHO, ART_RHO, 1.0]);
    MarketParams::from_vols_corr(ART_RISK_FREE, ART_DRIFT.to_vec(), &ART_VOLS, &corr, leverage_cap)
}

pub fn empirical_market(leverage_cap: f64) -> Result<MarketParams> {
    let cov = DMatrix::from_fn(4, 4, |i, j| EMP_COV_E4[i][j] * 1e-4);
    MarketParams::new(EMP_RISK_FREE, EMP_DRIFT.to_vec(), cov, leverage_cap)
}

fn monthly_steps(horizon: f64, per_month: usize) -> usize {
    (horizon * 12.0).round() as usize * per_month
}

/// Artificial market with `f(t) = (1 + (r̄ + ε^M)t)·100`.
pub fn artificial(
    required_return: f64,
    margin: f64,
    leverage_cap: f64,
    horizon: f64,
    rebalance: Rebalance,
) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: Some(format!(
            "artificial rbar={required_return} margin={margin} cap={leverage_cap} T={horizon} {}",
            rebalance.name().to_lowercase()
        )),
        output_dir: None,
        market: MarketBlock {
            risk_free: ART_RISK_FREE,
            drift: ART_DRIFT.to_vec(),
            covariance: None,
            vols: Some(ART_VOLS.to_vec()),
            corr: Some(vec![vec![1.0, ART_RHO], vec![ART_RHO, 1.0]]),
            leverage_cap,
        },
        target: TargetBlock {
            variant: TargetVariant::Affine,
            horizon,
            x0: Some(100.0),
            required_return: Some(required_return),
            margin: Some(margin),
            knots: None,
            kappa: None,
            evaluate_against: EvaluationTarget::Nominal,
        },
        grid: GridBlock {
            spacing: 0.5,
            extra_nodes: 5,
            time_steps: monthly_steps(horizon, STEPS_PER_MONTH),
            shape: None,
            checkpoint_every: None,
        },
        sim: SimBlock {
            paths: DESK_PATHS,
            rebalance,
            seed: DEFAULT_SEED,
            antithetic: false,
        },
        report: ReportBlock::default(),
    }
}

/// Four-asset market tracking `1.1·(B(t) − C(t))` over 15 years.
pub fn empirical(leverage_cap: f64) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: Some(format!("empirical cap={leverage_cap}")),
        output_dir: None,
        market: MarketBlock {
            risk_free: EMP_RISK_FREE,
            drift: EMP_DRIFT.to_vec(),
            covariance: Some(
                EMP_COV_E4
                    .iter()
                    .map(|r| r.iter().map(|v| v * 1e-4).collect())
                    .collect(),
            ),
            vols: None,
            corr: None,
            leverage_cap,
        },
        target: TargetBlock {
            variant: TargetVariant::Tabulated,
            horizon: 15.0,
            x0: None,
            required_return: None,
            margin: None,
            knots: Some(PENSION_TABLE.iter().map(|(t, b, c)| [*t, b - c]).collect()),
            kappa: Some(1.1),
            evaluate_against: EvaluationTarget::Nominal,
        },
        grid: GridBlock {
            spacing: 0.5,
            extra_nodes: 5,
            time_steps: monthly_steps(15.0, EMPIRICAL_STEPS_PER_MONTH),
            shape: None,
            checkpoint_every: None,
        },
        sim: SimBlock {
            paths: DESK_PATHS,
            rebalance: Rebalance::Monthly,
            seed: DEFAULT_SEED,
            antithetic: false,
        },
        report: ReportBlock::default(),
    }
}

/// Terminal statistics a preset row is expected to land near.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub mean_terminal: f64,
    pub achievement_half: f64,
    pub achievement_terminal: f64,
    pub percentile_terminal: f64,
}

const fn reference(mean: f64, a_half: f64, a_t: f64, p_t: f64) -> Reference {
    Reference {
        mean_terminal: mean,
        achievement_half: a_half / 100.0,
        achievement_terminal: a_t / 100.0,
        percentile_terminal: p_t,
    }
}

#[derive(Debug, Clone)]
pub struct TableRow {
    pub label: String,
    pub config: ExperimentConfig,
    pub reference: Reference,
}

pub const TABLE_NAMES: [&str; 4] = ["margin", "leverage", "rebalance", "empirical"];

/// Rows of a named comparison table, or `None` for an unknown name.
pub fn table(name: &str) -> Option<Vec<TableRow>> {
    let rows = match name {
        "margin" => [
            (0.0, reference(109.4, 63.0, 31.0, 106.5)),
            (0.001, reference(110.2, 64.0, 73.0, 106.6)),
            (0.002, reference(110.7, 65.0, 74.0, 106.6)),
            (0.003, reference(111.2, 66.0, 75.0, 106.6)),
            (0.004, reference(111.6, 67.0, 77.0, 106.5)),
            (0.005, reference(112.0, 68.0, 78.0, 106.4)),
        ]
        .into_iter()
        .map(|(margin, r)| TableRow {
            label: format!("margin={:.1}%", margin * 100.0),
            config: artificial(0.01, margin, 1.0, 10.0, Rebalance::Monthly),
            reference: r,
        })
        .collect(),
        "leverage" => [
            (0.01, 1.0, reference(110.7, 65.0, 74.0, 106.6)),
            (0.01, 2.0, reference(111.9, 93.0, 98.0, 111.6)),
            (0.01, 5.0, reference(112.0, 97.0, 100.0, 111.9)),
            (0.02, 1.0, reference(114.0, 17.0, 7.0, 104.8)),
            (0.02, 2.0, reference(120.4, 65.0, 76.0, 113.3)),
            (0.02, 5.0, reference(122.3, 94.0, 99.0, 121.6)),
            (0.03, 1.0, reference(116.4, 7.0, 0.0, 101.3)),
            (0.03, 2.0, reference(125.3, 32.0, 32.0, 113.0)),
            (0.03, 5.0, reference(132.1, 89.0, 96.0, 130.7)),
        ]
        .into_iter()
        .map(|(rbar, cap, r)| TableRow {
            label: format!("rbar={:.0}% cap={cap}", rbar * 100.0),
            config: artificial(rbar, 0.002, cap, 10.0, Rebalance::Monthly),
            reference: r,
        })
        .collect(),
        "rebalance" => {
            let short = [
                reference(104.4, 55.0, 59.0, 99.8),
                reference(104.4, 55.0, 59.0, 99.8),
                reference(104.4, 56.0, 59.0, 99.9),
                reference(104.4, 55.0, 59.0, 99.9),
                reference(104.5, 56.0, 59.0, 99.8),
            ];
            let long = [
                reference(120.4, 65.0, 77.0, 113.3),
                reference(120.4, 65.0, 77.0, 113.3),
                reference(120.4, 65.0, 76.0, 113.3),
                reference(120.5, 65.0, 76.0, 113.3),
                reference(121.0, 64.0, 75.0, 113.2),
            ];
            let mut rows = Vec::new();
            for (horizon, margin, refs) in [(2.0, 0.02, short), (10.0, 0.002, long)] {
                for (freq, r) in Rebalance::ALL.into_iter().zip(refs) {
                    rows.push(TableRow {
                        label: format!("T={horizon} {}", freq.name()),
                        config: artificial(0.02, margin, 2.0, horizon, freq),
                        reference: r,
                    });
                }
            }
            rows
        }
        "empirical" => [
            (1.0, reference(9.31, 0.0, 1.0, 4.68)),
            (2.0, reference(13.08, 16.0, 33.0, 6.76)),
            (3.0, reference(15.03, 43.0, 64.0, 7.71)),
            (4.0, reference(15.77, 57.0, 76.0, 8.42)),
            (5.0, reference(16.09, 63.0, 81.0, 9.29)),
            (7.0, reference(16.34, 67.0, 85.0, 11.82)),
            (10.0, reference(16.47, 69.0, 87.0, 13.09)),
        ]
        .into_iter()
        .map(|(cap, r)| TableRow {
            label: format!("cap={cap}"),
            config: empirical(cap),
            reference: r,
        })
        .collect(),
        _ => return None,
    };
    Some(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_table_builds() {
        for name in TABLE_NAMES {
            let rows = table(name).unwrap();
            assert!(!rows.is_empty());
            for row in rows {
                row.config.build().unwrap();
            }
        }
        assert!(table("nope").is_none());
    }

    #[test]
    fn time_steps_per_month() {
        assert_eq!(artificial(0.01, 0.0, 1.0, 10.0, Rebalance::Monthly).grid.time_steps, 60_000);
        assert_eq!(artificial(0.02, 0.02, 2.0, 2.0, Rebalance::Monthly).grid.time_steps, 12_000);
        assert_eq!(empirical(1.0).grid.time_steps, 9000);
    }
}
