//! Training loop: seeded batch shuffling, dead-latent tracking, auxiliary
//! loss, and best-validation-EV checkpointing.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    loss_and_grads_given, matryoshka_loss_and_grads_given, selection_masks, LossBatch,
};
use super::optim::{adam_step, renormalize_decoder, AdamState};
use super::{SaeError, SaeModel};

/// Training hyperparameters. Defaults mirror the reference configuration:
/// Adam at 1e-4, batch 256, 30 epochs, auxiliary weight 1/32, dead threshold
/// 2000 steps, auxiliary top-k 256, seed 43.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub aux_weight: f64,
    pub dead_threshold_steps: usize,
    pub aux_topk: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 256,
            epochs: 30,
            aux_weight: 1.0 / 32.0,
            dead_threshold_steps: 2000,
            aux_topk: 256,
            weight_decay: 0.0,
            seed: 43,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SaeError> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(SaeError::BadConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(SaeError::BadConfig("batch_size must be positive".into()));
        }
        if !self.aux_weight.is_finite() || self.aux_weight < 0.0 {
            return Err(SaeError::BadConfig(format!(
                "aux_weight must be >= 0, got {}",
                self.aux_weight
            )));
        }
        if self.dead_threshold_steps == 0 || self.aux_topk == 0 {
            return Err(SaeError::BadConfig(
                "dead_threshold_steps and aux_topk must be positive".into(),
            ));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(SaeError::BadConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Which objective the loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    BatchTopK,
    Matryoshka,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    /// Explained variance on the validation set, in SAE-input space.
    pub val_ev: f64,
    pub dead_latents: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Completed,
    /// Training hit a non-finite loss; the returned model is the best (or
    /// initial) checkpoint seen before divergence.
    Diverged { epoch: usize, step: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    /// Validation uses per-batch BatchTopK at this batch size.
    pub eval_batch_size: usize,
    pub loss_kind: LossKind,
    pub termination: Termination,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SaeModel,
    pub history: TrainHistory,
}

/// Explained variance of per-batch BatchTopK reconstruction over `x`,
/// measured against the set's own mean.
pub fn input_space_ev(model: &SaeModel, x: &Array2<f64>, batch_size: usize) -> Result<f64, SaeError> {
    let mean = x.mean_axis(Axis(0)).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    let n = x.nrows();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let xb = x.slice(ndarray::s![start..end, ..]).to_owned();
        let (_, rec) = model.forward(&xb)?;
        num += (&xb - &rec).iter().map(|v| v * v).sum::<f64>();
        den += xb
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .zip(mean.iter())
                    .map(|(v, m)| (v - m) * (v - m))
                    .sum::<f64>()
            })
            .sum::<f64>();
        start = end;
    }
    Ok(if den > 0.0 { 1.0 - num / den } else { f64::NAN })
}

fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// Removes the component of each decoder-column gradient parallel to the
/// column itself. Columns are held at unit norm, so the radial component
/// carries no usable signal and only pollutes the Adam moments.
fn project_decoder_grads(model: &SaeModel, grads: &mut super::loss::SaeGradients) {
    for c in 0..model.num_latents() {
        let col = model.w_dec().column(c);
        let norm_sq = col.dot(&col);
        if norm_sq <= 0.0 {
            continue;
        }
        let radial = grads.w_dec.column(c).dot(&col) / norm_sq;
        let projected = &grads.w_dec.column(c) - &(&col * radial);
        grads.w_dec.column_mut(c).assign(&projected);
    }
}

/// Trains `init` on `train_x`, checkpointing by best validation EV.
///
/// A non-finite loss aborts the run and returns the best checkpoint seen so
/// far with `Termination::Diverged` in the history.
pub fn train(
    init: SaeModel,
    train_x: &Array2<f64>,
    val_x: &Array2<f64>,
    config: &TrainConfig,
    loss_kind: LossKind,
) -> Result<TrainOutcome, SaeError> {
    config.validate()?;
    if train_x.ncols() != init.input_dim() || val_x.ncols() != init.input_dim() {
        return Err(SaeError::ShapeMismatch {
            expected: format!("[_, {}]", init.input_dim()),
            got: format!("[_, {}] / [_, {}]", train_x.ncols(), val_x.ncols()),
        });
    }
    if loss_kind == LossKind::Matryoshka && init.group_sizes().is_none() {
        return Err(SaeError::GroupsRequired);
    }

    let mut model = init;
    let mut state = AdamState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = model.num_latents();
    let n = train_x.nrows();
    let mut steps_since_fired = vec![0usize; m];
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: None,
        eval_batch_size: config.batch_size,
        loss_kind,
        termination: Termination::Completed,
    };
    let mut best: Option<(f64, SaeModel)> = None;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut global_step: u64 = 0;

    'epochs: for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            let xb = gather_rows(train_x, chunk);
            let dead: Vec<bool> = steps_since_fired
                .iter()
                .map(|s| *s >= config.dead_threshold_steps)
                .collect();
            let batch = LossBatch {
                x: &xb,
                aux_weight: config.aux_weight,
                aux_topk: config.aux_topk,
                dead: &dead,
            };
            let masks = selection_masks(&model, &batch)?;
            let result = match loss_kind {
                LossKind::BatchTopK => loss_and_grads_given(&model, &batch, &masks),
                LossKind::Matryoshka => matryoshka_loss_and_grads_given(&model, &batch, &masks),
            };
            let (loss, mut grads) = match result {
                Ok(v) => v,
                Err(SaeError::NonFiniteLoss { .. }) => {
                    history.termination = Termination::Diverged {
                        epoch,
                        step: global_step,
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            epoch_loss += loss;
            project_decoder_grads(&model, &mut grads);
            adam_step(
                &mut model,
                &grads,
                &mut state,
                config.learning_rate,
                config.weight_decay,
            );
            renormalize_decoder(&mut model, &mut rng);
            global_step += 1;
            for (j, fired) in masks.fired().iter().enumerate() {
                if *fired {
                    steps_since_fired[j] = 0;
                } else {
                    steps_since_fired[j] += 1;
                }
            }
        }
        let val_ev = input_space_ev(&model, val_x, config.batch_size)?;
        let dead_latents = steps_since_fired
            .iter()
            .filter(|s| **s >= config.dead_threshold_steps)
            .count();
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / n as f64,
            val_ev,
            dead_latents,
        });
        let is_better = match &best {
            None => true,
            Some((ev, _)) => val_ev > *ev,
        };
        if is_better {
            best = Some((val_ev, model.clone()));
            history.best_epoch = Some(epoch);
        }
    }

    let model = match best {
        Some((_, best_model)) => best_model,
        None => model, // zero epochs or divergence before the first eval
    };
    Ok(TrainOutcome { model, history })
}
