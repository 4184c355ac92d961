//! Monte Carlo evaluation of a solved policy.
//!
//! Risky assets are sampled as exact multivariate geometric Brownian motion
//! over each rebalance interval; at every rebalance date the self-financing
//! wealth is reallocated to `π*(t, X_t)`. Each path draws from its own ChaCha
//! stream keyed by path index, so results do not depend on thread count.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb::ValueSurface;
use crate::market::{MarketModel, MarketParams, TargetSpec};
use crate::policy::PolicySlice;

/// Width of a tracking-error histogram bin (0.5%).
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rebalance {
    Daily,
    Weekly,
    Monthly,
    Quarterly,
    Yearly,
}

impl Rebalance {
    pub const ALL: [Rebalance; 5] = [
        Rebalance::Daily,
        Rebalance::Weekly,
        Rebalance::Monthly,
        Rebalance::Quarterly,
        Rebalance::Yearly,
    ];

    pub fn per_year(self) -> u32 {
        match self {
            Rebalance::Daily => 252,
            Rebalance::Weekly => 52,
            Rebalance::Monthly => 12,
            Rebalance::Quarterly => 4,
            Rebalance::Yearly => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Rebalance::Daily => "Daily",
            Rebalance::Weekly => "Weekly",
            Rebalance::Monthly => "Monthly",
            Rebalance::Quarterly => "Quarterly",
            Rebalance::Yearly => "Yearly",
        }
    }

    /// Rebalance dates `0, Δ, 2Δ, …` ending exactly at `horizon`.
    pub fn dates(self, horizon: f64) -> Vec<f64> {
        let per = self.per_year() as f64;
        let n = (horizon * per - 1e-9).ceil().max(1.0) as usize;
        let mut d: Vec<f64> = (0..n).map(|j| j as f64 / per).collect();
        d.push(horizon);
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub paths: usize,
    pub rebalance: Rebalance,
    pub seed: u64,
    pub antithetic: bool,
    /// Keep per-path terminal wealth in the returned statistics.
    pub keep_terminal: bool,
}

impl SimConfig {
    pub fn new(paths: usize, rebalance: Rebalance, seed: u64) -> Self {
        Self {
            paths,
            rebalance,
            seed,
            antithetic: false,
            keep_terminal: false,
        }
    }
}

/// Lower-triangular `L` with `LLᵀ = Σ`. Zero pivots of a semidefinite matrix
/// produce zero columns.
pub fn cholesky_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::InvalidInput("covariance must be square".into()));
    }
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale * n as f64;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = cov[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return Err(Error::InvalidInput(format!(
                "covariance is indefinite (pivot {d:.3e} at column {})",
                j + 1
            )));
        }
        if d <= tol {
            // Semidefinite: the Schur complement column must vanish too.
            for i in j + 1..n {
                let mut s = cov[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > 1e-8 * scale {
                    return Err(Error::InvalidInput(format!(
                        "covariance is indefinite at column {}",
                        j + 1
                    )));
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = cov[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Lower-tail quantile: the wealth that a fraction `level` of the sample meets
/// or exceeds, with linear interpolation between order statistics.
pub fn percentile_point(sample: &[f64], level: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidInput(format!("level {level} outside [0, 1]")));
    }
    let mut s = sample.to_vec();
    let pos = (s.len() - 1) as f64 * (1.0 - level);
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, lo_val, rest) = s.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_val = *lo_val;
    if frac == 0.0 || rest.is_empty() {
        return Ok(lo_val);
    }
    let hi_val = rest.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(lo_val + frac * (hi_val - lo_val))
}

/// Fixed-width histogram of tracking-error rates `(X − f)/f`. Bin `k` covers
/// `[k·w, (k+1)·w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub width: f64,
    pub first_bin: i64,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    fn bin_of(e: f64, width: f64) -> i64 {
        let k = (e / width).floor() as i64;
        // A tiny negative error can round to -0.0 / 0 bins; keep the sign.
        if e < 0.0 {
            k.min(-1)
        } else {
            k.max(0)
        }
    }

    pub fn from_errors(errors: &[f64], width: f64) -> Self {
        if errors.is_empty() {
            return Self {
                width,
                first_bin: 0,
                counts: Vec::new(),
                total: 0,
            };
        }
        let bins: Vec<i64> = errors.iter().map(|&e| Self::bin_of(e, width)).collect();
        let lo = *bins.iter().min().unwrap();
        let hi = *bins.iter().max().unwrap();
        let mut counts = vec![0u64; (hi - lo + 1) as usize];
        for b in bins {
            counts[(b - lo) as usize] += 1;
        }
        Self {
            width,
            first_bin: lo,
            counts,
            total: errors.len() as u64,
        }
    }

    pub fn edges(&self, idx: usize) -> (f64, f64) {
        let k = self.first_bin + idx as i64;
        (k as f64 * self.width, (k + 1) as f64 * self.width)
    }

    pub fn masses(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.total as f64)
            .collect()
    }

    /// Number of samples in bins strictly below zero.
    pub fn count_below_zero(&self) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .filter(|(i, _)| self.first_bin + (*i as i64) < 0)
            .map(|(_, c)| *c)
            .sum()
    }

    pub fn mass_below_zero(&self) -> f64 {
        self.count_below_zero() as f64 / self.total as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "bin_left,bin_right,mass")?;
        for (i, m) in self.masses().into_iter().enumerate() {
            let (l, r) = self.edges(i);
            writeln!(out, "{l},{r},{m}")?;
        }
        Ok(())
    }
}

/// Histogram of `(X_T − f(T))/f(T)` with 0.5% bins.
pub fn tracking_error_histogram(terminal_wealth: &[f64], target: &TargetSpec) -> Result<Histogram> {
    let f_end = target.target(target.horizon())?;
    if !(f_end > 0.0) {
        return Err(Error::InvalidInput("terminal target must be positive".into()));
    }
    let errors: Vec<f64> = terminal_wealth.iter().map(|x| (x - f_end) / f_end).collect();
    Ok(Histogram::from_errors(&errors, HISTOGRAM_BIN_WIDTH))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSummary {
    pub mean_terminal: f64,
    pub achievement_half: f64,
    pub achievement_terminal: f64,
    pub percentile_terminal: f64,
}

impl std::fmt::Display for SimSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "mean X_T = {:.2}  A_T/2 = {:.1}%  A_T = {:.1}%  P_T = {:.2}",
            self.mean_terminal,
            100.0 * self.achievement_half,
            100.0 * self.achievement_terminal,
            self.percentile_terminal
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStats {
    pub paths: usize,
    pub times: Vec<f64>,
    pub target: Vec<f64>,
    pub mean_wealth: Vec<f64>,
    pub achievement_rate: Vec<f64>,
    /// Paths at or above target per date; `achievement_rate` is this over `paths`.
    pub achieved: Vec<u64>,
    pub percentile_point: Vec<f64>,
    pub histogram: Histogram,
    /// Paths whose wealth hit zero inside an interval and were absorbed.
    pub floor_events: u64,
    pub terminal_wealth: Option<Vec<f64>>,
}

impl SimStats {
    /// Index of the date closest to `t`.
    pub fn index_near(&self, t: f64) -> usize {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn achievement_at(&self, t: f64) -> f64 {
        self.achievement_rate[self.index_near(t)]
    }

    pub fn summary(&self) -> SimSummary {
        let last = self.times.len() - 1;
        let horizon = self.times[last];
        SimSummary {
            mean_terminal: self.mean_wealth[last],
            achievement_half: self.achievement_at(0.5 * horizon),
            achievement_terminal: self.achievement_rate[last],
            percentile_terminal: self.percentile_point[last],
        }
    }

    /// CSV with columns `t, mean_wealth, achievement_rate, percentile_point, target_f`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,mean_wealth,achievement_rate,percentile_point,target_f")?;
        for i in 0..self.times.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                self.times[i],
                self.mean_wealth[i],
                self.achievement_rate[i],
                self.percentile_point[i],
                self.target[i]
            )?;
        }
        Ok(())
    }
}

/// Rows of a statistics CSV, keyed by column name.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl StatsTable {
    /// Reads any numeric CSV with a header line; `#` lines are skipped.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut columns = None;
        let mut rows = Vec::new();
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match &columns {
                None => columns = Some(line.split(',').map(|s| s.trim().to_string()).collect()),
                Some(cols) => {
                    let row: Vec<f64> = line
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Format(format!("bad number in CSV: {e}")))?;
                    if row.len() != Vec::<String>::len(cols) {
                        return Err(Error::Format(format!(
                            "CSV row has {} fields, header has {}",
                            row.len(),
                            Vec::<String>::len(cols)
                        )));
                    }
                    rows.push(row);
                }
            }
        }
        Ok(Self {
            columns: columns.ok_or_else(|| Error::Format("CSV has no header".into()))?,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

struct Interval {
    start: f64,
    chol: DMatrix<f64>,
    log_drift: DVector<f64>,
    sqrt_dt: f64,
    cash_growth: f64,
}

/// Simulates `cfg.paths` wealth paths under the surface's policy and
/// measures them against `target`.
pub fn simulate<M: MarketModel + ?Sized>(
    market: &M,
    target: &TargetSpec,
    surface: &ValueSurface,
    cfg: &SimConfig,
) -> Result<SimStats> {
    let horizon = target.horizon();
    if (surface.horizon() - horizon).abs() > 1e-12 * horizon.max(1.0) {
        return Err(Error::Config(format!(
            "surface horizon {} differs from target horizon {horizon}",
            surface.horizon()
        )));
    }
    let dates = cfg.rebalance.dates(horizon);
    let h = surface.time_step();
    for &tau in &dates[..dates.len() - 1] {
        let row = surface.row_at_or_before(tau)?;
        if tau - row.time > h * (1.0 + 1e-9) {
            return Err(Error::Config(format!(
                "no stored surface row within one solver step of rebalance date {tau} (nearest {}); \
                 solve with rows kept for this rebalance frequency",
                row.time
            )));
        }
    }
    simulate_with(market, target, cfg, |t| {
        let slice = PolicySlice::new(surface, t)?;
        Ok(move |params: &MarketParams, x: f64| slice.weights(params, x))
    })
}

/// Simulates an arbitrary feedback rule. `policy_at(τ)` is called once per
/// rebalance date and returns the weight map `(params, X_τ) ↦ π` used until
/// the next date.
pub fn simulate_with<M, F, P>(
    market: &M,
    target: &TargetSpec,
    cfg: &SimConfig,
    mut policy_at: F,
) -> Result<SimStats>
where
    M: MarketModel + ?Sized,
    F: FnMut(f64) -> Result<P>,
    P: Fn(&MarketParams, f64) -> Result<DVector<f64>> + Sync,
{
    if cfg.paths < 2 {
        return Err(Error::Config("at least two paths are required".into()));
    }
    let dates = cfg.rebalance.dates(target.horizon());

    let m = market.num_assets();
    let x0 = target.initial_wealth();
    let n = cfg.paths;
    let mut wealth = vec![x0; n];
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let stream = if cfg.antithetic { p / 2 } else { p } as u64;
            rng.set_stream(stream);
            rng
        })
        .collect();

    let mut stats = StatsAccumulator::default();
    stats.record(0.0, target.target(0.0)?, &wealth)?;
    let mut floor_events = 0u64;

    for j in 0..dates.len() - 1 {
        let start = dates[j];
        let dt = dates[j + 1] - start;
        let params = market.params_at(start);
        let params = params.as_ref();
        let cov = params.covariance();
        let interval = Interval {
            start,
            chol: cholesky_factor(cov)?,
            log_drift: DVector::from_fn(m, |i, _| (params.drift()[i] - 0.5 * cov[(i, i)]) * dt),
            sqrt_dt: dt.sqrt(),
            cash_growth: (params.risk_free() * dt).exp_m1(),
        };
        let policy = policy_at(interval.start)?;

        let floored: u64 = wealth
            .par_iter_mut()
            .zip(rngs.par_iter_mut())
            .enumerate()
            .map(|(p, (x, rng))| -> Result<u64> {
                if *x <= 0.0 {
                    return Ok(0);
                }
                let w = policy(params, *x)?;
                if w.len() != m {
                    return Err(Error::InvalidInput(format!(
                        "policy returned {} weights for {m} assets",
                        w.len()
                    )));
                }
                let sign = if cfg.antithetic && p % 2 == 1 { -1.0 } else { 1.0 };
                let z = DVector::from_fn(m, |_, _| {
                    let v: f64 = StandardNormal.sample(rng);
                    sign * v
                });
                let shock = &interval.chol * z;
                let mut risky = 0.0;
                for i in 0..m {
                    let gross = (interval.log_drift[i] + interval.sqrt_dt * shock[i]).exp();
                    risky += w[i] * (gross - 1.0);
                }
                let growth = 1.0 + risky + (1.0 - w.sum()) * interval.cash_growth;
                let next = *x * growth;
                if next <= 0.0 {
                    *x = 0.0;
                    Ok(1)
                } else {
                    *x = next;
                    Ok(0)
                }
            })
            .try_reduce(|| 0, |a, b| Ok(a + b))?;
        floor_events += floored;
        let t = dates[j + 1];
        stats.record(t, target.target(t)?, &wealth)?;
    }

    let histogram = tracking_error_histogram(&wealth, target)?;
    Ok(SimStats {
        paths: n,
        times: stats.times,
        target: stats.target,
        mean_wealth: stats.mean,
        achievement_rate: stats.achieved.iter().map(|&a| a as f64 / n as f64).collect(),
        achieved: stats.achieved,
        percentile_point: stats.percentile,
        histogram,
        floor_events,
        terminal_wealth: cfg.keep_terminal.then_some(wealth),
    })
}

#[derive(Default)]
struct StatsAccumulator {
    times: Vec<f64>,
    target: Vec<f64>,
    mean: Vec<f64>,
    achieved: Vec<u64>,
    percentile: Vec<f64>,
}

impl StatsAccumulator {
    fn record(&mut self, t: f64, f_t: f64, wealth: &[f64]) -> Result<()> {
        self.times.push(t);
        self.target.push(f_t);
        self.mean.push(wealth.iter().sum::<f64>() / wealth.len() as f64);
        self.achieved.push(wealth.iter().filter(|&&x| x >= f_t).count() as u64);
        self.percentile.push(percentile_point(wealth, 0.95)?);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_identity_and_round_trips() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(cholesky_factor(&id).unwrap(), id);

        let corr = DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 1.0]);
        let v = [0.01, 0.2];
        let cov = DMatrix::from_fn(2, 2, |i, j| v[i] * corr[(i, j)] * v[j]);
        let l = cholesky_factor(&cov).unwrap();
        assert!((&l * l.transpose() - &cov).amax() <= 1e-12 * cov.amax());

        let emp = crate::presets::empirical_market(1.0).unwrap();
        let cov = emp.covariance();
        let l = cholesky_factor(cov).unwrap();
        assert!((&l * l.transpose() - cov).amax() <= 1e-12 * cov.amax());
        assert!(l.upper_triangle().iter().enumerate().all(|(k, v)| {
            let (i, j) = (k % 4, k / 4);
            i >= j || *v == 0.0
        }));
    }

    #[test]
    fn cholesky_semidefinite_and_indefinite() {
        let v = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let rank_one = &v * v.transpose();
        let l = cholesky_factor(&rank_one).unwrap();
        assert!((&l * l.transpose() - &rank_one).amax() <= 1e-12 * rank_one.amax());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky_factor(&bad).is_err());
    }

    #[test]
    fn percentile_examples() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_relative_eq!(percentile_point(&s, 0.95).unwrap(), 5.95, max_relative = 1e-14);
        assert_eq!(percentile_point(&[4.2; 17], 0.95).unwrap(), 4.2);
        assert!(percentile_point(&[], 0.95).is_err());
        // order does not matter
        let mut r = s.clone();
        r.reverse();
        assert_eq!(percentile_point(&r, 0.95).unwrap(), percentile_point(&s, 0.95).unwrap());
    }

    #[test]
    fn histogram_at_target() {
        let spec = TargetSpec::affine(100.0, 0.0, 0.0, 10.0).unwrap();
        let h = tracking_error_histogram(&[100.0; 50], &spec).unwrap();
        assert_eq!(h.counts, vec![50]);
        assert_eq!(h.edges(0), (0.0, HISTOGRAM_BIN_WIDTH));
        assert_eq!(h.masses(), vec![1.0]);
        assert_eq!(h.count_below_zero(), 0);
    }

    #[test]
    fn histogram_keeps_sign_of_tiny_errors() {
        let h = Histogram::from_errors(&[-1e-300, 0.0, 1e-300, -0.0051], 0.005);
        assert_eq!(h.count_below_zero(), 2);
        assert_eq!(h.total, 4);
        let total: f64 = h.masses().iter().sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-15);
    }

    #[test]
    fn rebalance_dates() {
        let d = Rebalance::Monthly.dates(10.0);
        assert_eq!(d.len(), 121);
        assert_eq!(d[0], 0.0);
        assert_eq!(*d.last().unwrap(), 10.0);
        assert_eq!(Rebalance::Daily.dates(2.0).len(), 505);
        assert_eq!(Rebalance::Yearly.dates(2.5), vec![0.0, 1.0, 2.0, 2.5]);
    }

    #[test]
    fn stats_table_parses_comments() {
        let csv = "# fingerprint=abc\nt,a\n0,1\n1,2\n";
        let t = StatsTable::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(t.column("a").unwrap(), vec![1.0, 2.0]);
        assert!(t.column("b").is_none());
        assert!(StatsTable::read_csv("t,a\n0\n".as_bytes()).is_err());
    }
}
