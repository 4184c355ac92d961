use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hjbfolio::checkpoint::{read_checkpoint, write_checkpoint};
use hjbfolio::presets::{self, TABLE_NAMES};
use hjbfolio::sim::StatsTable;
use hjbfolio::{weight_grid, Error, Experiment, ExperimentConfig, ValueSurface, WeightGrid};
use tempfile::NamedTempFile;

const SURFACE_FILE: &str = "surface.bin";
const REPORT_FILE: &str = "solve_report.json";
const WEIGHTS_FILE: &str = "weights.csv";
const STATS_FILE: &str = "stats.csv";
const HISTOGRAM_FILE: &str = "histogram.csv";
const FINGERPRINT_PREFIX: &str = "# fingerprint ";

#[derive(Parser)]
#[command(name = "hjbfolio", version, about = "Solve, simulate and report target-tracking portfolios")]
struct Cli {
    /// Worker threads for the per-node QPs and the simulation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the HJB equation; writes surface.bin, solve_report.json and weights.csv.
    Solve {
        #[command(flatten)]
        io: ConfigIo,
    },
    /// Simulate the solved policy; writes stats.csv and histogram.csv.
    Simulate {
        #[command(flatten)]
        io: ConfigIo,
        /// Surface checkpoint (default: <out>/surface.bin).
        #[arg(long)]
        surface: Option<PathBuf>,
        #[command(flatten)]
        sim: SimOverrides,
    },
    /// Turn stats.csv (and optionally weights.csv) into plain-text plot series.
    Report {
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Verify the stats fingerprint against this configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Run every row of a preset table, or write its configurations.
    Tables {
        /// One of: margin, leverage, rebalance, empirical.
        preset: String,
        #[arg(long, default_value = "tables")]
        out: PathBuf,
        /// Only write one TOML configuration per row.
        #[arg(long)]
        configs_only: bool,
        /// Only run rows whose label contains this text.
        #[arg(long)]
        only: Option<String>,
        #[command(flatten)]
        sim: SimOverrides,
    },
}

#[derive(Args)]
struct ConfigIo {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: the config's output_dir, else ".").
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
}

impl SimOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.sim.seed = seed;
        }
        if let Some(paths) = self.paths {
            cfg.sim.paths = paths;
        }
    }
}

/// A failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidInput(_) | Error::Domain { .. } => 2,
            Error::BlowUp { .. } => 3,
            Error::NodeQp { source, .. } if matches!(**source, Error::BlowUp { .. }) => 3,
            _ => 1,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(1, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Solve { io } => cmd_solve(&io),
        Command::Simulate { io, surface, sim } => cmd_simulate(&io, surface.as_deref(), &sim),
        Command::Report {
            stats,
            weights,
            config,
            out,
        } => cmd_report(&stats, weights.as_deref(), config.as_deref(), &out),
        Command::Tables {
            preset,
            out,
            configs_only,
            only,
            sim,
        } => cmd_tables(&preset, &out, configs_only, only.as_deref(), &sim),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text)
        .map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))
}

fn build(cfg: &ExperimentConfig) -> Result<Experiment, Failure> {
    cfg.build().map_err(|e| Failure::new(2, e.to_string()))
}

fn out_dir(io: &ConfigIo, cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let dir = io
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes through a temporary file in the same directory, then renames, so
/// a failed command never leaves a partial file behind.
fn write_atomic<F>(path: &Path, fill: F) -> CmdResult
where
    F: FnOnce(&mut dyn Write) -> Result<(), Failure>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = NamedTempFile::new_in(dir)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush()?;
    }
    tmp.persist(path).map_err(|e| Failure::from(e.error))?;
    Ok(())
}

fn cmd_solve(io: &ConfigIo) -> CmdResult {
    let cfg = load_config(&io.config)?;
    let exp = build(&cfg)?;
    let dir = out_dir(io, &cfg)?;
    let (surface, report) = exp.solve()?;
    let weights = weight_grid(&surface, &exp.market, exp.report.time_count, exp.report.wealth_count)?;

    write_atomic(&dir.join(SURFACE_FILE), |w| Ok(write_checkpoint(&surface, w)?))?;
    write_atomic(&dir.join(REPORT_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, &report).map_err(|e| Failure::new(1, e.to_string()))?;
        Ok(writeln!(w)?)
    })?;
    write_atomic(&dir.join(WEIGHTS_FILE), |w| Ok(weights.write_csv(w)?))?;

    println!(
        "solved {} nodes x {} steps in {:.1}s; {} curvature clamps; boundary sign changes {}{}",
        report.node_count,
        report.time_steps,
        report.wall_time_secs,
        report.curvature_clamps,
        report.boundary_sign_changes,
        if report.boundary_oscillation() { " (oscillating near x*)" } else { "" }
    );
    println!("fingerprint {}", exp.fingerprint_hex());
    Ok(())
}

fn read_surface(path: &Path) -> Result<ValueSurface, Failure> {
    let file = fs::File::open(path).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(file))
        .map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))
}

fn cmd_simulate(io: &ConfigIo, surface: Option<&Path>, sim: &SimOverrides) -> CmdResult {
    let mut cfg = load_config(&io.config)?;
    sim.apply(&mut cfg);
    let exp = build(&cfg)?;
    let dir = out_dir(io, &cfg)?;
    let path = surface.map(Path::to_path_buf).unwrap_or_else(|| dir.join(SURFACE_FILE));
    let surface = read_surface(&path)?;
    if surface.fingerprint() != &exp.fingerprint {
        return Err(Failure::new(
            4,
            format!(
                "{} was solved for {}, the configuration hashes to {}",
                path.display(),
                hex_of(surface.fingerprint()),
                exp.fingerprint_hex()
            ),
        ));
    }
    let stats = exp.simulate(&surface)?;
    write_atomic(&dir.join(STATS_FILE), |w| {
        writeln!(w, "{FINGERPRINT_PREFIX}{}", exp.fingerprint_hex())?;
        Ok(stats.write_csv(w)?)
    })?;
    write_atomic(&dir.join(HISTOGRAM_FILE), |w| Ok(stats.histogram.write_csv(w)?))?;
    println!("{}", stats.summary());
    if stats.floor_events > 0 {
        println!("{} paths hit zero wealth", stats.floor_events);
    }
    Ok(())
}

fn hex_of(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_fingerprint(text: &str) -> Option<&str> {
    text.lines()
        .find_map(|l| l.strip_prefix(FINGERPRINT_PREFIX))
        .map(str::trim)
}

fn series(table: &StatsTable, name: &str, path: &Path) -> Result<Vec<f64>, Failure> {
    table
        .column(name)
        .ok_or_else(|| Failure::new(5, format!("{}: missing series `{name}`", path.display())))
}

fn cmd_report(stats: &Path, weights: Option<&Path>, config: Option<&Path>, out: &Path) -> CmdResult {
    let text = fs::read_to_string(stats).map_err(|e| Failure::new(5, format!("{}: {e}", stats.display())))?;
    if let Some(cfg) = config {
        let exp = build(&load_config(cfg)?)?;
        match read_fingerprint(&text) {
            Some(fp) if fp == exp.fingerprint_hex() => {}
            Some(fp) => {
                return Err(Failure::new(
                    4,
                    format!("{} carries fingerprint {fp}, the configuration hashes to {}", stats.display(), exp.fingerprint_hex()),
                ))
            }
            None => return Err(Failure::new(4, format!("{} carries no fingerprint", stats.display()))),
        }
    }
    let table = StatsTable::read_csv(text.as_bytes()).map_err(|e| Failure::new(5, e.to_string()))?;
    let t = series(&table, "t", stats)?;
    let target = series(&table, "target_f", stats)?;
    let mean = series(&table, "mean_wealth", stats)?;
    let rate = series(&table, "achievement_rate", stats)?;
    let pct = series(&table, "percentile_point", stats)?;

    fs::create_dir_all(out)?;
    write_columns(&out.join("wealth_curve.dat"), &["t", "target", "mean_wealth"], &[&t, &target, &mean])?;
    write_columns(&out.join("achievement_curve.dat"), &["t", "achievement_rate"], &[&t, &rate])?;
    write_columns(&out.join("percentile_curve.dat"), &["t", "percentile_point"], &[&t, &pct])?;
    let mut written = 3;

    if let Some(path) = weights {
        let file = fs::File::open(path).map_err(|e| Failure::new(5, format!("{}: {e}", path.display())))?;
        let grid = WeightGrid::read_csv(BufReader::new(file)).map_err(|e| Failure::new(5, format!("{}: {e}", path.display())))?;
        for k in 0..grid.num_assets {
            write_heatmap(&out.join(format!("weight_heatmap_pi_{}.dat", k + 1)), &grid, |w| w[k])?;
        }
        write_heatmap(&out.join("weight_heatmap_leverage.dat"), &grid, |w| w.iter().sum())?;
        written += grid.num_assets + 1;
    }
    println!("wrote {written} series files to {}", out.display());
    Ok(())
}

/// Whitespace-separated columns with a `#` header line.
fn write_columns(path: &Path, names: &[&str], cols: &[&[f64]]) -> CmdResult {
    write_atomic(path, |w| {
        writeln!(w, "# {}", names.join(" "))?;
        for i in 0..cols[0].len() {
            let row: Vec<String> = cols.iter().map(|c| c[i].to_string()).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    })
}

/// Matrix layout: first row is the wealth axis, then one row per time.
fn write_heatmap<F: Fn(&[f64]) -> f64>(path: &Path, grid: &WeightGrid, value: F) -> CmdResult {
    write_atomic(path, |w| {
        let axis: Vec<String> = grid.wealths.iter().map(|x| x.to_string()).collect();
        writeln!(w, "# t \\ x {}", axis.join(" "))?;
        for (i, t) in grid.times.iter().enumerate() {
            let row: Vec<String> = (0..grid.wealths.len()).map(|j| value(grid.at(i, j)).to_string()).collect();
            writeln!(w, "{t} {}", row.join(" "))?;
        }
        Ok(())
    })
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect()
}

fn cmd_tables(preset: &str, out: &Path, configs_only: bool, only: Option<&str>, sim: &SimOverrides) -> CmdResult {
    let rows = presets::table(preset).ok_or_else(|| {
        Failure::new(2, format!("unknown preset `{preset}`; expected one of {}", TABLE_NAMES.join(", ")))
    })?;
    fs::create_dir_all(out)?;
    let mut lines = vec!["label,mean_terminal,achievement_half,achievement_terminal,percentile_terminal,ref_mean,ref_half,ref_terminal,ref_percentile".to_string()];
    for row in rows {
        if only.is_some_and(|f| !row.label.contains(f)) {
            continue;
        }
        let mut cfg = row.config.clone();
        sim.apply(&mut cfg);
        if configs_only {
            let path = out.join(format!("{preset}_{}.toml", slug(&row.label)));
            let text = cfg.to_toml()?;
            write_atomic(&path, |w| Ok(w.write_all(text.as_bytes())?))?;
            println!("{}", path.display());
            continue;
        }
        let exp = build(&cfg)?;
        let (surface, report) = exp.solve()?;
        let s = exp.simulate(&surface)?.summary();
        let r = row.reference;
        println!(
            "{:<20} {s}  | reference {:.2} {:.0}% {:.0}% {:.2}  ({:.0}s solve)",
            row.label,
            r.mean_terminal,
            100.0 * r.achievement_half,
            100.0 * r.achievement_terminal,
            r.percentile_terminal,
            report.wall_time_secs
        );
        lines.push(format!(
            "{},{},{},{},{},{},{},{},{}",
            row.label,
            s.mean_terminal,
            s.achievement_half,
            s.achievement_terminal,
            s.percentile_terminal,
            r.mean_terminal,
            r.achievement_half,
            r.achievement_terminal,
            r.percentile_terminal
        ));
    }
    if !configs_only {
        let path = out.join(format!("{preset}.csv"));
        write_atomic(&path, |w| Ok(writeln!(w, "{}", lines.join("\n"))?))?;
    }
    Ok(())
}
