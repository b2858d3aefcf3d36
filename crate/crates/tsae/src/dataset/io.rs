//! The `.tsae` binary format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "TSAE" | version u32 | N u32 | T u32 | d u32 | H u32 | W u32 | stride u32
//! | T full-step indices (u32 each)
//! | N*T*d IEEE-754 f32, trajectory-major then timestep then channel
//! ```
//!
//! `H = W = 0` encodes an absent grid. Values are stored as f32; in-memory
//! math stays f64, so saving a dataset whose values did not originate from
//! f32 storage is lossy while load/save/load is always bit-exact.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use super::{DatasetError, Grid, TrajectoryDataset, TrajectoryMeta};
use crate::wire::{FormatError, Reader, Writer};

pub const TSAE_MAGIC: [u8; 4] = *b"TSAE";
pub const TSAE_VERSION: u32 = 1;

/// Encodes a dataset into the `.tsae` byte layout.
pub fn write_trajectories(ds: &TrajectoryDataset) -> Vec<u8> {
    let (n, t, d) = ds.data().dim();
    let (h, w) = ds.grid().map_or((0, 0), |g| (g.h as u32, g.w as u32));
    let mut out = Writer::new();
    out.magic(TSAE_MAGIC)
        .u32(TSAE_VERSION)
        .u32(n as u32)
        .u32(t as u32)
        .u32(d as u32)
        .u32(h)
        .u32(w)
        .u32(ds.meta().stride)
        .u32_slice(&ds.meta().full_step_indices);
    let flat: Vec<f32> = ds.data().iter().map(|v| *v as f32).collect();
    out.f32_slice(&flat);
    out.into_bytes()
}

/// Decodes a `.tsae` byte buffer, validating every dataset invariant.
pub fn read_trajectories(bytes: &[u8]) -> Result<TrajectoryDataset, DatasetError> {
    let mut r = Reader::new(bytes);
    r.magic(TSAE_MAGIC)?;
    r.version(TSAE_VERSION)?;
    let n = r.u32()? as usize;
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let stride = r.u32()?;
    let full_steps = r.u32_vec(t)?;
    let count = n
        .checked_mul(t)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| FormatError::invalid("dimensions", "N*T*d overflows"))?;
    let raw = r.f32_vec(count)?;
    r.finish()?;

    let grid = match (h, w) {
        (0, 0) => None,
        (0, _) | (_, 0) => {
            return Err(FormatError::invalid("grid", "one grid axis is zero").into())
        }
        (h, w) => Some(Grid { h, w }),
    };
    let data = Array3::from_shape_vec((n, t, d), raw.iter().map(|v| *v as f64).collect())
        .map_err(|e| FormatError::invalid("payload", e.to_string()))?;
    TrajectoryDataset::new(
        data,
        grid,
        TrajectoryMeta {
            stride,
            full_step_indices: full_steps,
            seed: 0,
        },
    )
}

pub fn save_trajectories(ds: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    fs::write(path, write_trajectories(ds))?;
    Ok(())
}

pub fn load_trajectories(path: impl AsRef<Path>) -> Result<TrajectoryDataset, DatasetError> {
    read_trajectories(&fs::read(path)?)
}
