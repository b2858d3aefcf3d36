//! Steering interventions on activation trajectories: piecewise-constant
//! temporal expansion, the norm-scaled additive update rule, single-feature
//! plans, and source-to-target feature transfer with masked contrast
//! selection.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::DecoderTrajectory;
use crate::dataset::{DatasetError, TrajectoryDataset};
use crate::wire::{FormatError, Reader, Writer};

/// Reference steering strength for feature transfer.
pub const DEFAULT_TRANSFER_ALPHA: f64 = 10.0;
/// Reference top-p size for masked contrast selection.
pub const DEFAULT_TRANSFER_TOP_P: usize = 50;
/// Local single-feature strength sweep used in the reference experiments.
pub const LOCAL_ALPHA_SWEEP: [f64; 5] = [0.0, 2.5, 5.0, 10.0, 20.0];

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("full-step indices must be strictly increasing, got {0:?}")]
    UnorderedSteps(Vec<u32>),
    #[error("total_steps {total} does not cover last full-step index {last}")]
    TotalStepsTooSmall { total: usize, last: u32 },
    #[error("mask token {token} out of bounds for {tokens} tokens")]
    MaskOutOfBounds { token: u32, tokens: usize },
    #[error("local steering region is empty")]
    EmptyRegion,
    #[error("step {step} out of range (plan covers {total} steps)")]
    StepOutOfRange { step: usize, total: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("masked codes sum to zero on the {0} side; contrast scores need nonzero activation mass")]
    ZeroActivationMass(&'static str),
    #[error("no decoder trajectory supplied for selected latent {0}")]
    MissingTrajectory(usize),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which spatial tokens each full denoising step intervenes on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSpec {
    /// Every token at every step.
    Global,
    /// The same token set at every step.
    Uniform(Vec<u32>),
    /// One token set per full step.
    PerStep(Vec<Vec<u32>>),
}

impl MaskSpec {
    /// Token set at `step`, or `None` for the full grid.
    pub fn tokens_at(&self, step: usize) -> Option<&[u32]> {
        match self {
            MaskSpec::Global => None,
            MaskSpec::Uniform(tokens) => Some(tokens),
            MaskSpec::PerStep(steps) => Some(&steps[step]),
        }
    }
}

/// Per-full-step steering directions plus the token mask and strength.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    /// One activation-space direction per full denoising step.
    pub directions: Array2<f64>,
    pub mask: MaskSpec,
    pub alpha: f64,
    /// Subsampled full-step indices the per-block directions came from.
    pub full_step_indices: Vec<u32>,
}

impl SteeringPlan {
    pub fn total_steps(&self) -> usize {
        self.directions.nrows()
    }

    pub fn dim(&self) -> usize {
        self.directions.ncols()
    }

    pub fn validate(&self) -> Result<(), SteeringError> {
        if !self.full_step_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(SteeringError::UnorderedSteps(self.full_step_indices.clone()));
        }
        if let Some(last) = self.full_step_indices.last() {
            if self.total_steps() <= *last as usize {
                return Err(SteeringError::TotalStepsTooSmall {
                    total: self.total_steps(),
                    last: *last,
                });
            }
        }
        if let MaskSpec::PerStep(steps) = &self.mask {
            if steps.len() != self.total_steps() {
                return Err(SteeringError::ShapeMismatch {
                    expected: format!("{} per-step masks", self.total_steps()),
                    got: format!("{}", steps.len()),
                });
            }
        }
        if !self.alpha.is_finite() || !self.directions.iter().all(|v| v.is_finite()) {
            return Err(SteeringError::ShapeMismatch {
                expected: "finite alpha and directions".into(),
                got: "non-finite values".into(),
            });
        }
        Ok(())
    }
}

/// Expands per-block directions to all full steps: step `tau` uses block `i`
/// while `tau_i <= tau < tau_{i+1}`, the last block covers the tail, and
/// steps before `tau_0` fall back to block 0.
pub fn expand_piecewise_constant(
    per_block: &Array2<f64>,
    full_step_indices: &[u32],
    total_steps: usize,
) -> Result<Array2<f64>, SteeringError> {
    if full_step_indices.len() != per_block.nrows() || full_step_indices.is_empty() {
        return Err(SteeringError::ShapeMismatch {
            expected: format!("{} full-step indices", per_block.nrows()),
            got: format!("{}", full_step_indices.len()),
        });
    }
    if !full_step_indices.windows(2).all(|w| w[0] < w[1]) {
        return Err(SteeringError::UnorderedSteps(full_step_indices.to_vec()));
    }
    let last = *full_step_indices.last().unwrap();
    if total_steps <= last as usize {
        return Err(SteeringError::TotalStepsTooSmall {
            total: total_steps,
            last,
        });
    }
    let mut out = Array2::<f64>::zeros((total_steps, per_block.ncols()));
    let mut block = 0usize;
    for tau in 0..total_steps {
        while block + 1 < full_step_indices.len()
            && tau as u32 >= full_step_indices[block + 1]
        {
            block += 1;
        }
        out.row_mut(tau).assign(&per_block.row(block));
    }
    Ok(out)
}

/// Applies the steering rule at one full step, in place:
/// `a_token += alpha * ||a_token|| * v_step` for masked tokens, using each
/// token's pre-update norm. Unmasked tokens (and the `alpha = 0` case) are
/// left bitwise untouched.
pub fn apply_steering(
    tokens: &mut Array2<f64>,
    plan: &SteeringPlan,
    step: usize,
) -> Result<(), SteeringError> {
    plan.validate()?;
    if step >= plan.total_steps() {
        return Err(SteeringError::StepOutOfRange {
            step,
            total: plan.total_steps(),
        });
    }
    if tokens.ncols() != plan.dim() {
        return Err(SteeringError::ShapeMismatch {
            expected: format!("[_, {}]", plan.dim()),
            got: format!("[_, {}]", tokens.ncols()),
        });
    }
    let n_tokens = tokens.nrows();
    if let Some(masked) = plan.mask.tokens_at(step) {
        for t in masked {
            if *t as usize >= n_tokens {
                return Err(SteeringError::MaskOutOfBounds {
                    token: *t,
                    tokens: n_tokens,
                });
            }
        }
    }
    if plan.alpha == 0.0 {
        return Ok(());
    }
    let direction = plan.directions.row(step);
    let mut update = |row: usize| {
        let norm = tokens.row(row).dot(&tokens.row(row)).sqrt();
        let scale = plan.alpha * norm;
        let steered = &tokens.row(row) + &(&direction * scale);
        tokens.row_mut(row).assign(&steered);
    };
    match plan.mask.tokens_at(step) {
        None => {
            for row in 0..n_tokens {
                update(row);
            }
        }
        Some(masked) => {
            for t in masked {
                update(*t as usize);
            }
        }
    }
    Ok(())
}

/// Builds a steering plan from one latent's activation-space decoder
/// trajectory, expanded piecewise-constantly to `total_steps`.
pub fn single_feature_plan(
    traj: &DecoderTrajectory,
    mask: MaskSpec,
    alpha: f64,
    full_step_indices: &[u32],
    total_steps: usize,
) -> Result<SteeringPlan, SteeringError> {
    if let MaskSpec::Uniform(tokens) = &mask {
        if tokens.is_empty() {
            return Err(SteeringError::EmptyRegion);
        }
    }
    let directions = expand_piecewise_constant(&traj.phi, full_step_indices, total_steps)?;
    let plan = SteeringPlan {
        directions,
        mask,
        alpha,
        full_step_indices: full_step_indices.to_vec(),
    };
    plan.validate()?;
    Ok(plan)
}

/// Top-p features ranked by masked contrast between source and target codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSelection {
    /// Selected latent indices, contrast-descending.
    pub selected: Vec<usize>,
    /// Contrast score per latent (full dictionary).
    pub scores: Vec<f64>,
    pub lambda_src: f64,
    pub lambda_tgt: f64,
    pub p: usize,
}

fn masked_mean_codes(
    codes: &Array2<f64>,
    mask: &[u32],
    side: &'static str,
) -> Result<Array1<f64>, SteeringError> {
    if mask.is_empty() {
        return Err(SteeringError::EmptyRegion);
    }
    for t in mask {
        if *t as usize >= codes.nrows() {
            return Err(SteeringError::MaskOutOfBounds {
                token: *t,
                tokens: codes.nrows(),
            });
        }
    }
    let mut mean = Array1::<f64>::zeros(codes.ncols());
    for t in mask {
        mean = mean + codes.row(*t as usize);
    }
    mean /= mask.len() as f64;
    if mean.sum() <= 0.0 {
        return Err(SteeringError::ZeroActivationMass(side));
    }
    Ok(mean)
}

/// Ranks features by `gamma_k = cbar_src_k / sum(cbar_src) - cbar_tgt_k /
/// sum(cbar_tgt)` over masked spatial means and keeps the top `p`, ties by
/// ascending latent index.
pub fn masked_contrast_select(
    codes_src: &Array2<f64>,
    codes_tgt: &Array2<f64>,
    mask_src: &[u32],
    mask_tgt: &[u32],
    p: usize,
    lambda_src: f64,
    lambda_tgt: f64,
) -> Result<TransferSelection, SteeringError> {
    if codes_src.ncols() != codes_tgt.ncols() {
        return Err(SteeringError::ShapeMismatch {
            expected: format!("[_, {}]", codes_src.ncols()),
            got: format!("[_, {}]", codes_tgt.ncols()),
        });
    }
    let src_mean = masked_mean_codes(codes_src, mask_src, "source")?;
    let tgt_mean = masked_mean_codes(codes_tgt, mask_tgt, "target")?;
    let src_sum = src_mean.sum();
    let tgt_sum = tgt_mean.sum();
    let scores: Vec<f64> = src_mean
        .iter()
        .zip(tgt_mean.iter())
        .map(|(s, t)| s / src_sum - t / tgt_sum)
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    order.truncate(p.min(scores.len()));
    Ok(TransferSelection {
        selected: order,
        scores,
        lambda_src,
        lambda_tgt,
        p,
    })
}

/// Per-block transfer direction: `v_i = sum_k (lambda_tgt * phi_tgt_k_i -
/// lambda_src * phi_src_k_i)` over the selected features.
pub fn transfer_direction(
    selection: &TransferSelection,
    src_trajectories: &BTreeMap<usize, DecoderTrajectory>,
    tgt_trajectories: &BTreeMap<usize, DecoderTrajectory>,
) -> Result<Array2<f64>, SteeringError> {
    let mut out: Option<Array2<f64>> = None;
    for k in &selection.selected {
        let src = src_trajectories
            .get(k)
            .ok_or(SteeringError::MissingTrajectory(*k))?;
        let tgt = tgt_trajectories
            .get(k)
            .ok_or(SteeringError::MissingTrajectory(*k))?;
        if src.phi.dim() != tgt.phi.dim() {
            return Err(SteeringError::ShapeMismatch {
                expected: format!("{:?}", src.phi.dim()),
                got: format!("{:?}", tgt.phi.dim()),
            });
        }
        let delta = &tgt.phi * selection.lambda_tgt - &src.phi * selection.lambda_src;
        out = Some(match out {
            None => delta,
            Some(acc) => acc + delta,
        });
    }
    out.ok_or(SteeringError::EmptyRegion)
}

/// Applies a plan to a stored trajectory dataset: every image block gets the
/// plan's direction at each subsampled step's full-step index.
pub fn steer_dataset(
    ds: &TrajectoryDataset,
    plan: &SteeringPlan,
) -> Result<TrajectoryDataset, SteeringError> {
    plan.validate()?;
    if plan.dim() != ds.channels() {
        return Err(SteeringError::ShapeMismatch {
            expected: format!("direction dim {}", ds.channels()),
            got: format!("{}", plan.dim()),
        });
    }
    let tokens_per_unit = ds.grid().map_or(1, |g| g.tokens());
    let units = ds.num_trajectories() / tokens_per_unit;
    let t = ds.num_timesteps();
    let mut data = ds.data().clone();
    for i in 0..t {
        let step = ds.meta().full_step_indices[i] as usize;
        if step >= plan.total_steps() {
            return Err(SteeringError::StepOutOfRange {
                step,
                total: plan.total_steps(),
            });
        }
        for unit in 0..units {
            let mut tokens = Array2::<f64>::zeros((tokens_per_unit, ds.channels()));
            for tok in 0..tokens_per_unit {
                tokens
                    .row_mut(tok)
                    .assign(&data.index_axis(ndarray::Axis(0), unit * tokens_per_unit + tok).row(i));
            }
            apply_steering(&mut tokens, plan, step)?;
            for tok in 0..tokens_per_unit {
                data.index_axis_mut(ndarray::Axis(0), unit * tokens_per_unit + tok)
                    .row_mut(i)
                    .assign(&tokens.row(tok));
            }
        }
    }
    Ok(TrajectoryDataset::new(data, ds.grid(), ds.meta().clone())?)
}

// --- plan file -------------------------------------------------------------

pub const PLAN_MAGIC: [u8; 4] = *b"PLAN";
pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct PlanHeader {
    alpha: f64,
    total_steps: usize,
    dim: usize,
    full_step_indices: Vec<u32>,
    mask: MaskSpec,
}

/// Plan file: JSON header (alpha, mask, full-step indices) followed by the
/// direction payload as f64 little-endian.
pub fn write_plan(plan: &SteeringPlan) -> Vec<u8> {
    let header = PlanHeader {
        alpha: plan.alpha,
        total_steps: plan.total_steps(),
        dim: plan.dim(),
        full_step_indices: plan.full_step_indices.clone(),
        mask: plan.mask.clone(),
    };
    let json = serde_json::to_vec(&header).expect("plan header serializes");
    let mut w = Writer::new();
    w.magic(PLAN_MAGIC)
        .u32(PLAN_VERSION)
        .u32(json.len() as u32)
        .bytes(&json)
        .f64_iter(plan.directions.iter().copied());
    w.into_bytes()
}

pub fn read_plan(bytes: &[u8]) -> Result<SteeringPlan, SteeringError> {
    let mut r = Reader::new(bytes);
    r.magic(PLAN_MAGIC)?;
    r.version(PLAN_VERSION)?;
    let json_len = r.u32()? as usize;
    let json = r.bytes(json_len)?;
    let header: PlanHeader = serde_json::from_slice(json)
        .map_err(|e| FormatError::invalid("plan header", e.to_string()))?;
    let count = header
        .total_steps
        .checked_mul(header.dim)
        .ok_or_else(|| FormatError::invalid("plan dims", "payload size overflows"))?;
    let payload = r.f64_vec(count)?;
    r.finish()?;
    if !payload.iter().all(|v| v.is_finite()) {
        return Err(FormatError::NonFinite("plan directions").into());
    }
    let directions = Array2::from_shape_vec((header.total_steps, header.dim), payload)
        .map_err(|e| FormatError::invalid("plan payload", e.to_string()))?;
    let plan = SteeringPlan {
        directions,
        mask: header.mask,
        alpha: header.alpha,
        full_step_indices: header.full_step_indices,
    };
    plan.validate()?;
    Ok(plan)
}

pub fn save_plan(plan: &SteeringPlan, path: impl AsRef<Path>) -> Result<(), SteeringError> {
    fs::write(path, write_plan(plan))?;
    Ok(())
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<SteeringPlan, SteeringError> {
    read_plan(&fs::read(path)?)
}
