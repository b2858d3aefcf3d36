//! Trajectory storage, the `.tsae` on-disk format, train/validation splitting,
//! and a synthetic generator with planted linear dynamics plus sparse
//! residual features.

mod io;
mod synthetic;

pub use io::{load_trajectories, read_trajectories, save_trajectories, write_trajectories};
pub use synthetic::{generate_synthetic, GroundTruth, SyntheticSpec};

use ndarray::{Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::wire::FormatError;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dimension must be positive: {0}")]
    EmptyDimension(&'static str),
    #[error("need at least two timestep blocks, got {0}")]
    TooFewTimesteps(usize),
    #[error("trajectory count {n} is not divisible by grid size {h}x{w}")]
    GridMismatch { n: usize, h: usize, w: usize },
    #[error("full-step indices must be strictly increasing with length T={t}, got {got:?}")]
    BadFullSteps { t: usize, got: Vec<u32> },
    #[error("non-finite value in trajectory data")]
    NonFinite,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("validation fraction must lie in (0, 1), got {0}")]
    FractionOutOfRange(f64),
    #[error("split is degenerate: {0}")]
    DegenerateSplit(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Spatial token grid: trajectories of one image occupy a contiguous block of
/// `h * w` rows in row-major `(u, v)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// Subsampling metadata for a trajectory set.
///
/// `seed` records generator provenance only; the `.tsae` payload does not
/// carry it, so it reads back as 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryMeta {
    pub stride: u32,
    pub full_step_indices: Vec<u32>,
    pub seed: u64,
}

/// `n` token trajectories, each `t` subsampled timestep blocks of `d`
/// channels. Values are finite; storage on disk is f32, in-memory math f64.
#[derive(Debug, Clone)]
pub struct TrajectoryDataset {
    data: Array3<f64>,
    grid: Option<Grid>,
    meta: TrajectoryMeta,
}

impl TrajectoryDataset {
    pub fn new(
        data: Array3<f64>,
        grid: Option<Grid>,
        meta: TrajectoryMeta,
    ) -> Result<Self, DatasetError> {
        let (n, t, d) = data.dim();
        if n == 0 {
            return Err(DatasetError::EmptyDimension("trajectory count"));
        }
        if t < 2 {
            return Err(DatasetError::TooFewTimesteps(t));
        }
        if d == 0 {
            return Err(DatasetError::EmptyDimension("channel count"));
        }
        if let Some(g) = grid {
            if g.h == 0 || g.w == 0 {
                return Err(DatasetError::EmptyDimension("grid axis"));
            }
            if n % g.tokens() != 0 {
                return Err(DatasetError::GridMismatch { n, h: g.h, w: g.w });
            }
        }
        if meta.full_step_indices.len() != t
            || !meta.full_step_indices.windows(2).all(|w| w[0] < w[1])
        {
            return Err(DatasetError::BadFullSteps {
                t,
                got: meta.full_step_indices.clone(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DatasetError::NonFinite);
        }
        Ok(TrajectoryDataset { data, grid, meta })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn grid(&self) -> Option<Grid> {
        self.grid
    }

    pub fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }

    pub fn num_trajectories(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_timesteps(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// All trajectories at timestep block `i`, shape `[n, d]`.
    pub fn block(&self, i: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(1), i)
    }

    /// Number of images (grid datasets) or trajectories (gridless).
    pub fn num_units(&self) -> usize {
        match self.grid {
            Some(g) => self.num_trajectories() / g.tokens(),
            None => self.num_trajectories(),
        }
    }

    fn take_units(&self, units: &[usize]) -> TrajectoryDataset {
        let block = self.grid.map_or(1, |g| g.tokens());
        let (_, t, d) = self.data.dim();
        let mut out = Array3::<f64>::zeros((units.len() * block, t, d));
        for (dst, &u) in units.iter().enumerate() {
            for k in 0..block {
                out.index_axis_mut(Axis(0), dst * block + k)
                    .assign(&self.data.index_axis(Axis(0), u * block + k));
            }
        }
        TrajectoryDataset {
            data: out,
            grid: self.grid,
            meta: self.meta.clone(),
        }
    }
}

/// Deterministic unit-level split: returns (train_units, val_units), both
/// sorted ascending, disjoint and exhaustive over `0..n_units`.
pub fn split_indices(
    n_units: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DatasetError::FractionOutOfRange(val_fraction));
    }
    let n_val = (val_fraction * n_units as f64).round() as usize;
    if n_val == 0 {
        return Err(DatasetError::DegenerateSplit(format!(
            "validation split of {n_units} units at fraction {val_fraction} is empty"
        )));
    }
    if n_val >= n_units {
        return Err(DatasetError::DegenerateSplit(format!(
            "validation split of {n_units} units at fraction {val_fraction} leaves no training units"
        )));
    }
    let mut order: Vec<usize> = (0..n_units).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Splits by image block when grid metadata is present, never within an
/// image; otherwise by individual trajectory.
pub fn split(
    ds: &TrajectoryDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(TrajectoryDataset, TrajectoryDataset), DatasetError> {
    let (train_units, val_units) = split_indices(ds.num_units(), val_fraction, seed)?;
    Ok((ds.take_units(&train_units), ds.take_units(&val_units)))
}
