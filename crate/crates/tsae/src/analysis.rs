//! Activation-space decoder trajectories and spatiotemporal feature
//! statistics: temporal profiles with early/middle/late grouping,
//! cross-timestep self-similarity, spatial cosine maps, positive spatial
//! entropy, and top-activating sample retrieval.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TrajectoryDataset;
use crate::evalmetrics::{ModelBundle, SaeSet};
use crate::residualize::{
    build_sae_input, ResidualizeError, RidgeChain, SaeInputs, TimestepNormalizer,
};
use crate::sae::{SaeError, SaeModel};

pub const ENTROPY_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("latent index {k} out of range (m = {m})")]
    LatentOutOfRange { k: usize, m: usize },
    #[error("operation requires grid metadata")]
    MissingGrid,
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("need at least {need} timesteps, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("decoder mapping requires a concatenated model (input dim {expected}, got {got})")]
    NotConcatenated { expected: usize, got: usize },
    #[error(transparent)]
    Residualize(#[from] ResidualizeError),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-latent sequence of activation-space directions, one row per
/// subsampled timestep, in original activation units.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrajectory {
    pub phi: Array2<f64>,
}

impl DecoderTrajectory {
    pub fn num_timesteps(&self) -> usize {
        self.phi.nrows()
    }

    pub fn direction(&self, i: usize) -> Array1<f64> {
        self.phi.row(i).to_owned()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.phi
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect()
    }
}

/// Maps an arbitrary decoder-space vector (length `t * d`) into an
/// activation-space trajectory.
///
/// Component scales undo the SAE-input normalization, the ridge chain (when
/// given) unrolls residual directions through the fitted dynamics, and the
/// per-timestep activation scales land the result in original units. Means
/// never enter: decoder vectors are directions, not absolute activations.
pub fn map_decoder_vector(
    direction: &Array1<f64>,
    comp_norm: &TimestepNormalizer,
    act_norm: &TimestepNormalizer,
    chain: Option<&RidgeChain>,
) -> Result<DecoderTrajectory, AnalysisError> {
    let t = comp_norm.num_timesteps();
    let d = comp_norm.dim();
    if direction.len() != t * d {
        return Err(AnalysisError::NotConcatenated {
            expected: t * d,
            got: direction.len(),
        });
    }
    if act_norm.num_timesteps() != t || act_norm.dim() != d {
        return Err(AnalysisError::OutOfRange(format!(
            "activation normalizer is [{}, {}], components are [{t}, {d}]",
            act_norm.num_timesteps(),
            act_norm.dim()
        )));
    }
    // undo the component normalization scale-wise: d^z = sigma_z * d
    let mut blocks: Vec<Array1<f64>> = (0..t)
        .map(|i| {
            let seg = direction.slice(ndarray::s![i * d..(i + 1) * d]);
            &seg * &comp_norm.sigma().row(i)
        })
        .collect();
    // unroll through the linear dynamics when blocks past 0 are residuals
    if let Some(chain) = chain {
        if chain.num_transitions() != t - 1 || chain.dim() != d {
            return Err(AnalysisError::OutOfRange(format!(
                "chain has {} transitions of dim {}, expected {} of dim {d}",
                chain.num_transitions(),
                chain.dim(),
                t - 1
            )));
        }
        for i in 1..t {
            let propagated = chain.weight(i - 1).dot(&blocks[i - 1]);
            blocks[i] = &blocks[i] + &propagated;
        }
    }
    // back to original activation units
    let mut phi = Array2::<f64>::zeros((t, d));
    for (i, b) in blocks.iter().enumerate() {
        phi.row_mut(i).assign(&(b * &act_norm.sigma().row(i)));
    }
    Ok(DecoderTrajectory { phi })
}

/// Activation-space decoder trajectory of latent `k` of a concatenated model.
pub fn decoder_to_activation_space(
    model: &SaeModel,
    comp_norm: &TimestepNormalizer,
    act_norm: &TimestepNormalizer,
    chain: Option<&RidgeChain>,
    k: usize,
) -> Result<DecoderTrajectory, AnalysisError> {
    if k >= model.num_latents() {
        return Err(AnalysisError::LatentOutOfRange {
            k,
            m: model.num_latents(),
        });
    }
    map_decoder_vector(&model.decoder_direction(k), comp_norm, act_norm, chain)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalGroup {
    Early,
    Middle,
    Late,
}

impl TemporalGroup {
    pub fn name(&self) -> &'static str {
        match self {
            TemporalGroup::Early => "early",
            TemporalGroup::Middle => "middle",
            TemporalGroup::Late => "late",
        }
    }
}

/// Normalized per-timestep decoder magnitudes plus the early/middle/late
/// classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalProfile {
    pub p: Vec<f64>,
    pub group: TemporalGroup,
}

/// Index partition into early/middle/late thirds, as even as possible with
/// earlier thirds larger.
pub fn thirds(t: usize) -> [std::ops::Range<usize>; 3] {
    let base = t / 3;
    let rem = t % 3;
    let s0 = base + usize::from(rem > 0);
    let s1 = base + usize::from(rem > 1);
    [0..s0, s0..s0 + s1, s0 + s1..t]
}

/// Profile of a decoder trajectory. Needs `t >= 3` for grouping; an all-zero
/// trajectory has no defined profile and yields `None`.
///
/// Grouping: the third holding a strict majority (> 1/2) of the temporal
/// mass wins; otherwise the third with maximal mass, ties to the earlier
/// third.
pub fn temporal_profile(traj: &DecoderTrajectory) -> Result<Option<TemporalProfile>, AnalysisError> {
    let t = traj.num_timesteps();
    if t < 3 {
        return Err(AnalysisError::TooShort { need: 3, got: t });
    }
    let norms = traj.norms();
    let total: f64 = norms.iter().sum();
    if total <= 0.0 {
        return Ok(None);
    }
    let p: Vec<f64> = norms.iter().map(|v| v / total).collect();
    let masses: Vec<f64> = thirds(t)
        .iter()
        .map(|r| p[r.clone()].iter().sum::<f64>())
        .collect();
    let group = if masses[0] > 0.5 {
        TemporalGroup::Early
    } else if masses[1] > 0.5 {
        TemporalGroup::Middle
    } else if masses[2] > 0.5 {
        TemporalGroup::Late
    } else {
        // no strict majority: maximal mass, earlier third wins ties
        let mut best = 0;
        for i in 1..3 {
            if masses[i] > masses[best] {
                best = i;
            }
        }
        [TemporalGroup::Early, TemporalGroup::Middle, TemporalGroup::Late][best]
    };
    Ok(Some(TemporalProfile { p, group }))
}

/// Cosine with zero-vector convention: a zero operand yields 0.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Mean off-diagonal cosine similarity over all ordered timestep pairs.
pub fn self_similarity(traj: &DecoderTrajectory) -> Result<f64, AnalysisError> {
    let t = traj.num_timesteps();
    if t < 2 {
        return Err(AnalysisError::TooShort { need: 2, got: t });
    }
    let rows: Vec<Array1<f64>> = (0..t).map(|i| traj.direction(i)).collect();
    let mut sum = 0.0;
    for i in 0..t {
        for j in 0..t {
            if i != j {
                sum += cosine(&rows[i], &rows[j]);
            }
        }
    }
    Ok(sum / (t * (t - 1)) as f64)
}

/// Full `t x t` cosine matrix between the trajectory's per-timestep
/// directions (raw cosines, unit diagonal for nonzero rows).
pub fn cosine_matrix(traj: &DecoderTrajectory) -> Array2<f64> {
    let t = traj.num_timesteps();
    let rows: Vec<Array1<f64>> = (0..t).map(|i| traj.direction(i)).collect();
    Array2::from_shape_fn((t, t), |(i, j)| cosine(&rows[i], &rows[j]))
}

/// Cosine similarity between a latent's decoder direction at timestep `i`
/// and every spatial token of image `image` at that timestep.
pub fn spatial_cosine_map(
    traj: &DecoderTrajectory,
    ds: &TrajectoryDataset,
    image: usize,
    timestep: usize,
) -> Result<Array2<f64>, AnalysisError> {
    let grid = ds.grid().ok_or(AnalysisError::MissingGrid)?;
    if timestep >= ds.num_timesteps() || traj.num_timesteps() != ds.num_timesteps() {
        return Err(AnalysisError::OutOfRange(format!(
            "timestep {timestep} with trajectory length {} on dataset with T={}",
            traj.num_timesteps(),
            ds.num_timesteps()
        )));
    }
    let n_images = ds.num_units();
    if image >= n_images {
        return Err(AnalysisError::OutOfRange(format!(
            "image {image} out of {n_images}"
        )));
    }
    let phi = traj.direction(timestep);
    let s = grid.tokens();
    let mut map = Array2::<f64>::zeros((grid.h, grid.w));
    for u in 0..grid.h {
        for v in 0..grid.w {
            let q = image * s + u * grid.w + v;
            let token = ds.data().index_axis(Axis(0), q).row(timestep).to_owned();
            map[(u, v)] = cosine(&phi, &token);
        }
    }
    Ok(map)
}

/// Entropy of the ReLU-normalized map, normalized by the maximum possible
/// entropy `log S`. `None` when the map has no positive cell.
pub fn positive_spatial_entropy(map: &Array2<f64>) -> Option<f64> {
    let s = map.len();
    if s < 2 {
        return None;
    }
    let positive_sum: f64 = map.iter().map(|v| v.max(0.0)).sum();
    if positive_sum <= 0.0 {
        return None;
    }
    let mut h = 0.0;
    for v in map.iter() {
        let p = v.max(0.0) / (positive_sum + ENTROPY_EPS);
        if p > 0.0 {
            h -= p * (p + ENTROPY_EPS).ln();
        }
    }
    Some(h / (s as f64).ln())
}

/// Where one code row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeLocation {
    pub image: u32,
    pub token: u32,
    /// Timestep chunk for per-block models; `None` for a trajectory-level
    /// code covering all timesteps.
    pub chunk: Option<u32>,
}

/// Sparse codes for an evaluation set along with their provenance.
#[derive(Debug, Clone)]
pub struct EncodedSet {
    pub codes: Array2<f64>,
    pub locations: Vec<CodeLocation>,
}

impl EncodedSet {
    pub fn num_latents(&self) -> usize {
        self.codes.ncols()
    }
}

/// Encodes a dataset with a bundle's SAE(s), producing one row per token
/// trajectory (concatenated) or per (trajectory, chunk) pair (per-block).
pub fn encode_trajectories(
    bundle: &ModelBundle,
    ds: &TrajectoryDataset,
    batch_size: usize,
) -> Result<EncodedSet, AnalysisError> {
    bundle
        .validate()
        .map_err(|e| AnalysisError::OutOfRange(e.to_string()))?;
    let normalized = bundle.act_norm.apply(ds.data())?;
    let inputs = build_sae_input(
        &normalized,
        bundle.chain.as_ref(),
        bundle.spec,
        &bundle.comp_norm,
    )?;
    let tokens_per_image = ds.grid().map_or(1, |g| g.tokens()) as u32;
    let location_of = |q: usize, chunk: Option<u32>| CodeLocation {
        image: q as u32 / tokens_per_image,
        token: q as u32 % tokens_per_image,
        chunk,
    };
    match (&bundle.saes, inputs) {
        (SaeSet::Single(model), SaeInputs::Concatenated(x)) => {
            let codes = encode_batched(model, &x, batch_size)?;
            let locations = (0..x.nrows()).map(|q| location_of(q, None)).collect();
            Ok(EncodedSet { codes, locations })
        }
        (SaeSet::PerBlock(models), SaeInputs::PerBlock(blocks)) => {
            let n = blocks[0].nrows();
            let m = models[0].num_latents();
            if models.iter().any(|model| model.num_latents() != m) {
                return Err(AnalysisError::OutOfRange(
                    "per-block models disagree on latent count".into(),
                ));
            }
            let mut codes = Array2::<f64>::zeros((n * blocks.len(), m));
            let mut locations = Vec::with_capacity(n * blocks.len());
            for (i, (model, x)) in models.iter().zip(blocks.iter()).enumerate() {
                let block_codes = encode_batched(model, x, batch_size)?;
                for q in 0..n {
                    codes
                        .row_mut(i * n + q)
                        .assign(&block_codes.row(q));
                    locations.push(location_of(q, Some(i as u32)));
                }
            }
            Ok(EncodedSet { codes, locations })
        }
        _ => unreachable!("bundle validation fixes the input layout"),
    }
}

fn encode_batched(
    model: &SaeModel,
    x: &Array2<f64>,
    batch_size: usize,
) -> Result<Array2<f64>, SaeError> {
    let n = x.nrows();
    let mut out = Array2::<f64>::zeros((n, model.num_latents()));
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let xb = x.slice(ndarray::s![start..end, ..]).to_owned();
        let (code, _) = model.forward(&xb)?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&code);
        start = end;
    }
    Ok(out)
}

/// One retrieved activation for a latent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedActivation {
    pub image: u32,
    pub token: u32,
    pub chunk: Option<u32>,
    pub score: f64,
}

/// Strictly positive activations of latent `k`, ranked descending by score
/// with deterministic `(image, token, chunk)` tie-breaking. Returns at most
/// `count` entries; a latent that never fires yields an empty list.
pub fn top_activating_samples(
    set: &EncodedSet,
    k: usize,
    count: usize,
) -> Result<Vec<RankedActivation>, AnalysisError> {
    if k >= set.num_latents() {
        return Err(AnalysisError::LatentOutOfRange {
            k,
            m: set.num_latents(),
        });
    }
    let mut hits: Vec<RankedActivation> = set
        .codes
        .column(k)
        .iter()
        .zip(set.locations.iter())
        .filter(|(v, _)| **v > 0.0)
        .map(|(v, loc)| RankedActivation {
            image: loc.image,
            token: loc.token,
            chunk: loc.chunk,
            score: *v,
        })
        .collect();
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.token.cmp(&b.token))
            .then(a.chunk.cmp(&b.chunk))
    });
    hits.truncate(count);
    Ok(hits)
}

/// 8-bit binary PGM dump of a cosine map, with [-1, 1] mapped to [0, 255].
pub fn write_pgm(map: &Array2<f64>, path: impl AsRef<Path>) -> Result<(), AnalysisError> {
    let (h, w) = map.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for v in map.iter() {
        let clamped = v.clamp(-1.0, 1.0);
        out.push(((clamped + 1.0) * 0.5 * 255.0).round() as u8);
    }
    fs::write(path, out)?;
    Ok(())
}
