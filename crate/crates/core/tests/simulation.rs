use hjbfolio::sim::{
    percentile_point, simulate_with, tracking_error_histogram, Histogram, StatsTable,
    HISTOGRAM_BIN_WIDTH,
};
use hjbfolio::{presets, simulate, MarketParams, Rebalance, RowSelection, SimConfig, SimStats, TargetSpec};
use nalgebra::{DMatrix, DVector};

fn one_asset(r: f64, b: f64, sigma: f64) -> MarketParams {
    MarketParams::new(r, vec![b], DMatrix::from_element(1, 1, sigma * sigma), 1.0).unwrap()
}

fn constant(
    market: &MarketParams,
    target: &TargetSpec,
    cfg: &SimConfig,
    w: &[f64],
) -> SimStats {
    let w = DVector::from_column_slice(w);
    simulate_with(market, target, cfg, |_| {
        let w = w.clone();
        Ok(move |_: &MarketParams, _: f64| Ok(w.clone()))
    })
    .unwrap()
}

fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn zero_volatility_roll_up_is_deterministic() {
    let market = MarketParams::new(0.01, vec![0.05], DMatrix::zeros(1, 1), 1.0).unwrap();
    let target = TargetSpec::affine(100.0, 0.0, 0.0, 5.0).unwrap();
    let stats = constant(&market, &target, &SimConfig::new(50, Rebalance::Monthly, 1), &[0.0]);
    let expect = 100.0 * (0.01f64 * 5.0).exp();
    assert!((stats.mean_wealth.last().unwrap() - expect).abs() <= 1e-10 * expect);
    assert!((stats.percentile_point.last().unwrap() - expect).abs() <= 1e-10 * expect);
    assert!(stats.achievement_rate.iter().all(|a| *a == 1.0));

    // Forced all-in with no volatility grows at the asset drift.
    let stats = constant(&market, &target, &SimConfig::new(10, Rebalance::Yearly, 1), &[1.0]);
    let expect = 100.0 * (0.05f64 * 5.0).exp();
    assert!((stats.mean_wealth.last().unwrap() - expect).abs() <= 1e-10 * expect);
}

#[test]
fn constant_mix_mean_matches_closed_forms() {
    let (r, b, sigma, pi, horizon) = (0.01, 0.06, 0.2, 0.6, 3.0);
    let market = one_asset(r, b, sigma);
    let target = TargetSpec::affine(100.0, 0.0, 0.0, horizon).unwrap();
    let n_paths = 40_000;

    // Discrete rebalancing: the mean grows by E[growth] each interval.
    let mut cfg = SimConfig::new(n_paths, Rebalance::Quarterly, 11);
    cfg.keep_terminal = true;
    let stats = constant(&market, &target, &cfg, &[pi]);
    let dt = 0.25;
    let per = 1.0 + pi * ((b * dt).exp() - 1.0) + (1.0 - pi) * ((r * dt).exp() - 1.0);
    let expect = 100.0 * per.powi(12);
    let se = sample_sd(stats.terminal_wealth.as_ref().unwrap()) / (n_paths as f64).sqrt();
    let mean = *stats.mean_wealth.last().unwrap();
    assert!((mean - expect).abs() <= 3.0 * se, "mean {mean} expect {expect} se {se}");

    // Daily rebalancing approaches the continuously rebalanced lognormal mean.
    let mut cfg = SimConfig::new(n_paths, Rebalance::Daily, 12);
    cfg.keep_terminal = true;
    let stats = constant(&market, &target, &cfg, &[pi]);
    let expect = 100.0 * ((r + pi * (b - r)) * horizon).exp();
    let se = sample_sd(stats.terminal_wealth.as_ref().unwrap()) / (n_paths as f64).sqrt();
    let mean = *stats.mean_wealth.last().unwrap();
    assert!((mean - expect).abs() <= 3.0 * se, "mean {mean} expect {expect} se {se}");
}

#[test]
fn antithetic_pairs_mirror_log_returns() {
    let (r, b, sigma) = (0.01, 0.06, 0.2);
    let market = one_asset(r, b, sigma);
    let target = TargetSpec::affine(100.0, 0.0, 0.0, 1.0).unwrap();
    let mut cfg = SimConfig::new(100, Rebalance::Yearly, 5);
    cfg.antithetic = true;
    cfg.keep_terminal = true;
    let stats = constant(&market, &target, &cfg, &[1.0]);
    let x = stats.terminal_wealth.unwrap();
    let centre = (b - 0.5 * sigma * sigma) * 1.0;
    for pair in x.chunks(2) {
        let s = (pair[0] / 100.0).ln() + (pair[1] / 100.0).ln();
        assert!((s - 2.0 * centre).abs() <= 1e-12, "{pair:?}");
        assert_ne!(pair[0], pair[1]);
    }
}

#[test]
fn leveraged_paths_are_floored_and_absorbed() {
    let market = MarketParams::new(0.0, vec![0.001], DMatrix::from_element(1, 1, 1.0), 5.0).unwrap();
    let target = TargetSpec::affine(100.0, 0.0, 0.0, 5.0).unwrap();
    let mut cfg = SimConfig::new(2000, Rebalance::Yearly, 3);
    cfg.keep_terminal = true;
    let stats = constant(&market, &target, &cfg, &[5.0]);
    assert!(stats.floor_events > 0);
    let x = stats.terminal_wealth.as_ref().unwrap();
    assert!(x.iter().all(|v| *v >= 0.0));
    let ruined = x.iter().filter(|v| **v == 0.0).count() as u64;
    assert_eq!(ruined, stats.floor_events);
    // Ruined paths sit at tracking error −1.
    let ruin_bin = Histogram::from_errors(&[-1.0], HISTOGRAM_BIN_WIDTH).first_bin;
    assert_eq!(stats.histogram.first_bin, ruin_bin);
    assert_eq!(stats.histogram.counts[0], ruined);
}

#[test]
fn statistics_are_consistent_on_one_sample() {
    let market = one_asset(0.01, 0.06, 0.2);
    let target = TargetSpec::affine(100.0, 0.02, 0.0, 4.0).unwrap();
    let mut cfg = SimConfig::new(5000, Rebalance::Monthly, 9);
    cfg.keep_terminal = true;
    let stats = constant(&market, &target, &cfg, &[0.8]);
    let a_t = *stats.achievement_rate.last().unwrap();
    assert!(a_t > 0.2 && a_t < 0.8);
    assert!((a_t - (1.0 - stats.histogram.mass_below_zero())).abs() <= 1e-15);
    assert_eq!(
        stats.achieved.last().copied().unwrap(),
        stats.paths as u64 - stats.histogram.count_below_zero()
    );
    assert!((stats.histogram.masses().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    assert!(stats.achievement_rate.iter().all(|a| (0.0..=1.0).contains(a)));
    let x = stats.terminal_wealth.as_ref().unwrap();
    let max = x.iter().fold(0.0f64, |m, v| m.max(*v));
    assert!(*stats.percentile_point.last().unwrap() <= max);
    assert_eq!(stats.times.len(), 4 * 12 + 1);
    assert_eq!(stats.times[0], 0.0);
    assert_eq!(*stats.times.last().unwrap(), 4.0);
}

#[test]
fn seeds_are_reproducible_across_thread_counts() {
    let market = presets::artificial_market(2.0).unwrap();
    let target = TargetSpec::affine(100.0, 0.02, 0.0, 2.0).unwrap();
    let cfg = SimConfig::new(3001, Rebalance::Weekly, 77);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| constant(&market, &target, &cfg, &[1.5, 0.4]))
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a, b);
    let bits = |s: &SimStats| s.mean_wealth.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));

    let other = constant(&market, &target, &SimConfig::new(3001, Rebalance::Weekly, 78), &[1.5, 0.4]);
    assert_ne!(a.mean_wealth, other.mean_wealth);
}

#[test]
fn percentile_and_histogram_examples() {
    let sample: Vec<f64> = (1..=100).map(f64::from).collect();
    assert!((percentile_point(&sample, 0.95).unwrap() - 5.95).abs() <= 1e-12);
    assert_eq!(percentile_point(&[3.5; 7], 0.95).unwrap(), 3.5);
    assert!(percentile_point(&[], 0.95).is_err());

    let target = TargetSpec::affine(100.0, 0.0, 0.0, 10.0).unwrap();
    let h = tracking_error_histogram(&[100.0; 25], &target).unwrap();
    assert_eq!(h.first_bin, 0);
    assert_eq!(h.counts, vec![25]);
    assert_eq!(h.masses(), vec![1.0]);
    assert_eq!(h.edges(0), (0.0, 0.005));
}

#[test]
fn stats_csv_round_trips() {
    let market = one_asset(0.01, 0.06, 0.2);
    let target = TargetSpec::affine(100.0, 0.01, 0.0, 1.0).unwrap();
    let stats = constant(&market, &target, &SimConfig::new(200, Rebalance::Quarterly, 4), &[0.5]);
    let mut buf = Vec::new();
    stats.write_csv(&mut buf).unwrap();
    let table = StatsTable::read_csv(buf.as_slice()).unwrap();
    assert_eq!(table.column("t").unwrap(), stats.times);
    assert_eq!(table.column("achievement_rate").unwrap(), stats.achievement_rate);
    assert_eq!(table.column("target_f").unwrap(), stats.target);
    assert!(table.column("nope").is_none());

    let mut hist = Vec::new();
    stats.histogram.write_csv(&mut hist).unwrap();
    assert!(String::from_utf8(hist).unwrap().starts_with("bin_left,bin_right,mass\n"));
}

#[test]
fn bad_inputs_are_rejected() {
    let market = one_asset(0.01, 0.06, 0.2);
    let target = TargetSpec::affine(100.0, 0.01, 0.0, 1.0).unwrap();
    let w = DVector::from_column_slice(&[0.5]);
    let one_path = simulate_with(&market, &target, &SimConfig::new(1, Rebalance::Monthly, 1), |_| {
        let w = w.clone();
        Ok(move |_: &MarketParams, _: f64| Ok(w.clone()))
    });
    assert!(one_path.is_err());

    let wrong_len = simulate_with(&market, &target, &SimConfig::new(4, Rebalance::Monthly, 1), |_| {
        Ok(|_: &MarketParams, _: f64| Ok(DVector::from_column_slice(&[0.5, 0.5])))
    });
    assert!(wrong_len.is_err());
}

#[test]
fn surface_without_rebalance_rows_is_rejected() {
    let mut cfg = presets::artificial(0.01, 0.002, 1.0, 1.0, Rebalance::Monthly);
    cfg.grid.time_steps = 600;
    let exp = cfg.build().unwrap();
    let (sparse, _) = exp.solve_keeping(&RowSelection::default()).unwrap();
    assert!(simulate(&exp.market, &exp.eval_target, &sparse, &exp.sim).is_err());

    let (full, _) = exp.solve().unwrap();
    let mut sim = exp.sim.clone();
    sim.paths = 500;
    let a = simulate(&exp.market, &exp.eval_target, &full, &sim).unwrap();
    let b = simulate(&exp.market, &exp.eval_target, &full, &sim).unwrap();
    assert_eq!(a, b);
    assert_eq!(*a.achieved.last().unwrap(), 500 - a.histogram.count_below_zero());
}
