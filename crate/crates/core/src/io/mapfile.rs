//! Binary map files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DBMP"
//! 4       1     version (1)
//! 5       1     dtype: 0 = f32 probability, 1 = u8 hard label
//! 6       4     height (u32 LE)
//! 10      4     width  (u32 LE)
//! 14      ...   row-major payload, little-endian
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const MAGIC: &[u8; 4] = b"DBMP";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapDtype {
    /// `f32` values in `[0, 1]`.
    Probability = 0,
    /// `u8` values in `{0, 1}`.
    HardLabel = 1,
}

impl MapDtype {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MapDtype::Probability),
            1 => Some(MapDtype::HardLabel),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            MapDtype::Probability => 4,
            MapDtype::HardLabel => 1,
        }
    }
}

/// Serialises a grid. Probability maps are narrowed to `f32`.
pub fn encode(grid: &Grid, dtype: MapDtype) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    for (i, &v) in grid.values().iter().enumerate() {
        match dtype {
            MapDtype::Probability => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Domain(format!("map value {v} at index {i} outside [0, 1]")));
                }
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            MapDtype::HardLabel => {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Domain(format!("label value {v} at index {i} not in {{0, 1}}")));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Grid, MapDtype)> {
    let fail = |detail: String| Error::format(path, detail);
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic (expected DBMP) at offset 0".into()));
    }
    if bytes[4] != VERSION {
        return Err(fail(format!("unsupported version {} at offset 4", bytes[4])));
    }
    let dtype = MapDtype::from_code(bytes[5]).ok_or_else(|| fail(format!("unknown dtype {} at offset 5", bytes[5])))?;
    let height = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if height == 0 || width == 0 {
        return Err(fail(format!("empty dimensions {height}x{width}")));
    }
    let expected = height * width * dtype.width();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(fail(format!(
            "payload is {} bytes, expected {expected} for {height}x{width} (offset {HEADER_LEN})",
            payload.len()
        )));
    }
    let values: Vec<f64> = match dtype {
        MapDtype::Probability => payload
            .chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
                if (0.0..=1.0).contains(&v) {
                    Ok(v)
                } else {
                    Err(fail(format!("value {v} outside [0, 1] at offset {}", HEADER_LEN + 4 * i)))
                }
            })
            .collect::<Result<_>>()?,
        MapDtype::HardLabel => payload
            .iter()
            .enumerate()
            .map(|(i, &b)| match b {
                0 | 1 => Ok(b as f64),
                _ => Err(fail(format!("label byte {b} at offset {}", HEADER_LEN + i))),
            })
            .collect::<Result<_>>()?,
    };
    Ok((Grid::new(height, width, values)?, dtype))
}

pub fn write_map(path: &Path, grid: &Grid, dtype: MapDtype) -> Result<()> {
    let bytes = encode(grid, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_map(path: &Path) -> Result<(Grid, MapDtype)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads a map and checks its dtype.
pub fn read_map_as(path: &Path, dtype: MapDtype) -> Result<Grid> {
    let (grid, found) = read_map(path)?;
    if found != dtype {
        return Err(Error::format(path, format!("expected dtype {}, found {}", dtype as u8, found as u8)));
    }
    Ok(grid)
}
