//! `v3j`: a JSON header plus a raw little-endian f32 payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Grid, Volume};
use crate::error::{Error, Result};

const DTYPE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    channels: usize,
    dtype: String,
    data: String,
}

/// Raw payload path for a header path: the header's extension replaced by
/// `raw` (`pct.v3j` → `pct.raw`).
pub fn raw_path_for(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = raw_path_for(path);
    if raw == path {
        return Err(Error::InvalidArgument(format!(
            "header path {} collides with its raw payload",
            path.display()
        )));
    }
    let raw_name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad path {}", path.display())))?
        .to_string();
    let header = Header {
        dims: vol.grid().dims,
        spacing_mm: vol.grid().spacing_mm,
        origin_mm: vol.grid().origin_mm,
        channels: vol.channels(),
        dtype: DTYPE.into(),
        data: raw_name,
    };
    let mut bytes = Vec::with_capacity(vol.data().len() * 4);
    for v in vol.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::Header {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&text).map_err(|e| Error::Header {
        path: path.to_path_buf(),
        source: e,
    })?;
    if header.dtype != DTYPE {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    let grid = Grid::new(header.dims, header.spacing_mm, header.origin_mm)?;
    if header.channels == 0 {
        return Err(Error::InvalidMetadata("channels must be ≥ 1".into()));
    }
    let raw = path
        .parent()
        .map(|p| p.join(&header.data))
        .unwrap_or_else(|| PathBuf::from(&header.data));
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = header.channels * grid.len();
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: bytes.len() / 4,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(grid, header.channels, data)
}
