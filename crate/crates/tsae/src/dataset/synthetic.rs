//! Synthetic trajectory generator with planted linear dynamics and sparse
//! residual directions, plus the ground truth needed to score recovery.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DatasetError, Grid, TrajectoryDataset, TrajectoryMeta};
use crate::linalg::random_orthogonal;

/// Parameters for [`generate_synthetic`].
///
/// Each transition applies `a_i = A_i a_{i-1} + c_i + sparse + noise` where
/// `A_i` is `dynamics_scale` times an orthogonal matrix with per-axis gains in
/// `[0.7, 1.0]`. `residual_rank` unit directions per transition fire
/// independently with probability `residual_sparsity`.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n: usize,
    pub t: usize,
    pub d: usize,
    pub dynamics_scale: f64,
    pub residual_rank: usize,
    pub residual_sparsity: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub grid: Option<Grid>,
    pub stride: u32,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DatasetError> {
        if self.n == 0 {
            return Err(DatasetError::EmptyDimension("trajectory count"));
        }
        if self.t < 2 {
            return Err(DatasetError::TooFewTimesteps(self.t));
        }
        if self.d == 0 {
            return Err(DatasetError::EmptyDimension("channel count"));
        }
        if self.residual_rank > self.d {
            return Err(DatasetError::InvalidSpec(format!(
                "residual_rank {} exceeds channel count {}",
                self.residual_rank, self.d
            )));
        }
        if !(self.residual_sparsity > 0.0 && self.residual_sparsity <= 1.0) {
            return Err(DatasetError::InvalidSpec(format!(
                "residual_sparsity must lie in (0, 1], got {}",
                self.residual_sparsity
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(DatasetError::InvalidSpec(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        if !self.dynamics_scale.is_finite() || self.dynamics_scale <= 0.0 {
            return Err(DatasetError::InvalidSpec(format!(
                "dynamics_scale must be finite and > 0, got {}",
                self.dynamics_scale
            )));
        }
        if let Some(g) = self.grid {
            if g.h == 0 || g.w == 0 || !self.n.is_multiple_of(g.tokens()) {
                return Err(DatasetError::InvalidSpec(format!(
                    "grid {}x{} incompatible with n={}",
                    g.h, g.w, self.n
                )));
            }
        }
        Ok(())
    }
}

/// Planted generator state: transition maps, offsets, sparse directions, and
/// the per-sample coefficients actually drawn.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// `t - 1` matrices of shape `[d, d]`; `transition i-1 -> i` is entry `i-1`.
    pub transition_matrices: Vec<Array2<f64>>,
    /// `t - 1` offset vectors of length `d`.
    pub offsets: Vec<Array1<f64>>,
    /// Per transition, `residual_rank` unit rows of length `d`.
    pub directions: Vec<Array2<f64>>,
    /// Nonnegative sparse coefficients, shape `[n, t - 1, residual_rank]`.
    pub coefficients: Array3<f64>,
}

impl GroundTruth {
    /// Fraction of (q, direction) slots active at transition `i` (0-based over
    /// transitions), i.e. the empirical firing frequency of direction `j`.
    pub fn activation_frequency(&self, transition: usize, direction: usize) -> f64 {
        let col = self
            .coefficients
            .index_axis(Axis(1), transition)
            .index_axis(Axis(1), direction)
            .to_owned();
        let active = col.iter().filter(|v| **v > 0.0).count();
        active as f64 / col.len() as f64
    }

    /// Planted affine prediction of block `i` from block `i - 1` (raw units).
    pub fn predict_block(&self, prev: &Array2<f64>, i: usize) -> Array2<f64> {
        assert!(i >= 1);
        &prev.dot(&self.transition_matrices[i - 1].t()) + &self.offsets[i - 1]
    }

    /// Per-transition explained variance of the planted affine map on `ds`,
    /// in raw activation units with the eval-set mean as the baseline.
    pub fn planted_linear_ev(&self, ds: &TrajectoryDataset) -> Vec<f64> {
        (1..ds.num_timesteps())
            .map(|i| {
                let prev = ds.block(i - 1).to_owned();
                let cur = ds.block(i).to_owned();
                let pred = self.predict_block(&prev, i);
                let mean = cur.mean_axis(Axis(0)).unwrap();
                let num: f64 = (&cur - &pred).iter().map(|v| v * v).sum();
                let den: f64 = cur.rows().into_iter().map(|r| {
                    r.iter().zip(mean.iter()).map(|(v, m)| (v - m) * (v - m)).sum::<f64>()
                }).sum();
                1.0 - num / den
            })
            .collect()
    }
}

/// Generates a trajectory dataset with planted dynamics. Deterministic per
/// seed; noise draws are consumed even at `noise_std = 0`, so datasets that
/// differ only in `noise_std` share all planted structure.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(TrajectoryDataset, GroundTruth), DatasetError> {
    spec.validate()?;
    let (n, t, d, rank) = (spec.n, spec.t, spec.d, spec.residual_rank);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut transition_matrices = Vec::with_capacity(t - 1);
    let mut offsets = Vec::with_capacity(t - 1);
    let mut directions = Vec::with_capacity(t - 1);
    for _ in 1..t {
        let q = random_orthogonal(d, &mut rng);
        let gains: Vec<f64> = (0..d).map(|_| rng.random_range(0.7..1.0)).collect();
        let mut a = q;
        for (j, g) in gains.iter().enumerate() {
            let scaled = &a.column(j) * (spec.dynamics_scale * g);
            a.column_mut(j).assign(&scaled);
        }
        transition_matrices.push(a);
        offsets.push(Array1::from_iter(
            (0..d).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)),
        ));
        let mut dirs = Array2::<f64>::zeros((rank, d));
        for j in 0..rank {
            let mut v = Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let norm = v.dot(&v).sqrt().max(1e-12);
            v /= norm;
            dirs.row_mut(j).assign(&v);
        }
        directions.push(dirs);
    }

    // Active coefficients are half-normal with scale sqrt(d / rank) so the
    // per-coordinate sparse variance is roughly residual_sparsity.
    let coeff_scale = if rank > 0 {
        (d as f64 / rank as f64).sqrt()
    } else {
        0.0
    };

    let mut data = Array3::<f64>::zeros((n, t, d));
    let mut coefficients = Array3::<f64>::zeros((n, t - 1, rank));
    let mut cur = Array1::<f64>::zeros(d);
    for q in 0..n {
        for c in cur.iter_mut() {
            *c = rng.sample(StandardNormal);
        }
        data.slice_mut(ndarray::s![q, 0, ..]).assign(&cur);
        for i in 1..t {
            let mut next = transition_matrices[i - 1].dot(&cur) + &offsets[i - 1];
            for j in 0..rank {
                let active = rng.random::<f64>() < spec.residual_sparsity;
                let coeff = if active {
                    let raw: f64 = rng.sample(StandardNormal);
                    raw.abs() * coeff_scale
                } else {
                    0.0
                };
                coefficients[(q, i - 1, j)] = coeff;
                if coeff > 0.0 {
                    next += &(&directions[i - 1].row(j) * coeff);
                }
            }
            for v in next.iter_mut() {
                let eta: f64 = rng.sample(StandardNormal);
                *v += spec.noise_std * eta;
            }
            data.slice_mut(ndarray::s![q, i, ..]).assign(&next);
            cur = next;
        }
    }

    let meta = TrajectoryMeta {
        stride: spec.stride,
        full_step_indices: (0..t as u32).map(|i| i * spec.stride).collect(),
        seed: spec.seed,
    };
    let ds = TrajectoryDataset::new(data, spec.grid, meta)?;
    let gt = GroundTruth {
        transition_matrices,
        offsets,
        directions,
        coefficients,
    };
    Ok((ds, gt))
}
