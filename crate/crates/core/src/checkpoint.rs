//! Binary surface checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field              | type        |
//! |--------------------|-------------|
//! | magic `HJBSURF\0`  | 8 bytes     |
//! | version            | u32         |
//! | fingerprint        | 32 bytes    |
//! | spacing, shape     | f64, f64    |
//! | extra_nodes        | u64         |
//! | time_steps         | u64         |
//! | horizon, x_star    | f64, f64    |
//! | node_count         | u64         |
//! | row_count          | u64         |
//! | rows: step, t_k, N values | u64, f64, N × f64 |
//!
//! Floats are stored by bit pattern, so a round trip is exact.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hjb::{GridSpec, StoredRow, ValueSurface};
use crate::market::{MarketParams, TargetKind, TargetSpec};

const MAGIC: &[u8; 8] = b"HJBSURF\0";
pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 over every input that determines a solved surface.
pub fn fingerprint(
    market: &MarketParams,
    target: &TargetSpec,
    grid: &GridSpec,
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"hjbfolio-surface-v1");
    let mut put = |v: f64| h.update(v.to_bits().to_le_bytes());
    put(market.risk_free());
    market.drift().iter().for_each(|v| put(*v));
    market.covariance().iter().for_each(|v| put(*v));
    put(market.leverage_cap());
    put(target.horizon());
    match target.kind() {
        TargetKind::Affine {
            initial_wealth,
            required_return,
            margin,
        } => {
            put(1.0);
            put(*initial_wealth);
            put(*required_return);
            put(*margin);
        }
        TargetKind::Tabulated { knots, scale } => {
            put(2.0);
            put(*scale);
            knots.iter().for_each(|(t, v)| {
                put(*t);
                put(*v);
            });
        }
    }
    put(grid.spacing);
    put(grid.shape);
    h.update((grid.extra_nodes as u64).to_le_bytes());
    h.update((grid.time_steps as u64).to_le_bytes());
    h.finalize().into()
}

pub fn write_checkpoint<W: Write>(surface: &ValueSurface, mut out: W) -> Result<()> {
    let grid = surface.grid();
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(surface.fingerprint())?;
    for v in [grid.spacing, grid.shape] {
        out.write_all(&v.to_bits().to_le_bytes())?;
    }
    for v in [grid.extra_nodes, grid.time_steps] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in [surface.horizon(), surface.x_star()] {
        out.write_all(&v.to_bits().to_le_bytes())?;
    }
    for v in [surface.nodes().len(), surface.rows().len()] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for row in surface.rows() {
        out.write_all(&(row.step as u64).to_le_bytes())?;
        out.write_all(&row.time.to_bits().to_le_bytes())?;
        for v in &row.values {
            out.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_usize<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    usize::try_from(read_u64(r)?).map_err(|_| Error::Format(format!("{what} overflows usize")))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ValueSurface> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a surface checkpoint".into()));
    }
    let mut ver = [0u8; 4];
    input.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let mut fp = [0u8; 32];
    input.read_exact(&mut fp)?;
    let spacing = read_f64(&mut input)?;
    let shape = read_f64(&mut input)?;
    let extra_nodes = read_usize(&mut input, "extra_nodes")?;
    let time_steps = read_usize(&mut input, "time_steps")?;
    let horizon = read_f64(&mut input)?;
    let x_star = read_f64(&mut input)?;
    let node_count = read_usize(&mut input, "node_count")?;
    let row_count = read_usize(&mut input, "row_count")?;
    let grid = GridSpec::with_shape(spacing, extra_nodes, time_steps, shape)
        .map_err(|e| Error::Format(e.to_string()))?;
    if grid.node_count(x_star) != node_count {
        return Err(Error::Format(format!(
            "header says {node_count} nodes, grid implies {}",
            grid.node_count(x_star)
        )));
    }
    if row_count > time_steps + 1 {
        return Err(Error::Format(format!("{row_count} rows for {time_steps} steps")));
    }
    let mut rows = Vec::with_capacity(row_count);
    for _ in 0..row_count {
        let step = read_usize(&mut input, "step")?;
        let time = read_f64(&mut input)?;
        let values = (0..node_count)
            .map(|_| read_f64(&mut input))
            .collect::<Result<Vec<_>>>()?;
        rows.push(StoredRow { step, time, values });
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last row".into()));
    }
    ValueSurface::from_rows(grid, horizon, x_star, fp, rows)
}
