//! Binary and text serialization of feature grids.
//!
//! Binary layout: magic `SLKG`, `u32` version, `u8` kind code, `u32` rows,
//! `u32` cols, then `rows × cols` little-endian `f64` in row-major order.

use std::io::{Read, Write};

use crate::dsp::{FeatureGrid, FeatureKind};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SLKG";
const VERSION: u32 = 1;

pub fn write_grid<W: Write>(mut w: W, grid: &FeatureGrid) -> Result<()> {
    let (rows, cols) = grid.dim();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[grid.kind().code()])?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in grid.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_grid<R: Read>(mut r: R) -> Result<FeatureGrid> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a feature grid file".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported grid version {version}")));
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let kind = FeatureKind::from_code(code[0])
        .ok_or_else(|| Error::Format(format!("unknown feature kind code {}", code[0])))?;
    r.read_exact(&mut u32buf)?;
    let rows = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let cols = u32::from_le_bytes(u32buf) as usize;
    if rows.checked_mul(cols).is_none_or(|n| n > 1 << 24) {
        return Err(Error::Format(format!("implausible grid size {rows}x{cols}")));
    }
    let mut data = vec![0.0; rows * cols];
    let mut f64buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut f64buf)?;
        *v = f64::from_le_bytes(f64buf);
    }
    FeatureGrid::from_row_major(rows, cols, data, kind)
}

/// Human-readable dump: a `# kind rows cols` header, then one row per line.
pub fn grid_to_text(grid: &FeatureGrid) -> String {
    let (rows, cols) = grid.dim();
    let mut out = format!("# {} {rows} {cols}\n", grid.kind());
    for row in grid.values().rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn grid_from_text(text: &str) -> Result<FeatureGrid> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty grid text".into()))?;
    let fields: Vec<&str> = header.trim_start_matches('#').split_whitespace().collect();
    let [kind, rows, cols] = fields[..] else {
        return Err(Error::Format(format!("bad grid header {header:?}")));
    };
    let kind: FeatureKind = kind.parse()?;
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::Format(format!("bad grid dimension {s:?}: {e}")))
    };
    let (rows, cols) = (parse_dim(rows)?, parse_dim(cols)?);
    let mut data = Vec::with_capacity(rows * cols);
    for line in lines {
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad grid value {tok:?}: {e}")))?,
            );
        }
    }
    FeatureGrid::from_row_major(rows, cols, data, kind)
}
