//! BatchTopK sparse autoencoder and its Matryoshka variant: forward pass,
//! auxiliary dead-latent loss, hand-derived gradients, Adam with decoder
//! column renormalization, and the training loop.

mod checkpoint;
mod loss;
mod optim;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CheckpointHeader, SAE_MAGIC,
};
pub use loss::{
    aux_loss, loss_and_grads, loss_and_grads_given, loss_given_masks, matryoshka_loss_and_grads,
    matryoshka_loss_and_grads_given, matryoshka_loss_given_masks, selection_masks, LossBatch,
    SaeGradients, SelectionMasks,
};
pub use optim::{adam_step, renormalize_decoder, AdamState};
pub use train::{
    train, EpochStats, LossKind, Termination, TrainConfig, TrainHistory, TrainOutcome,
};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::wire::FormatError;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("matryoshka loss requires a model with latent groups")]
    GroupsRequired,
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64 },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Untied sparse autoencoder with BatchTopK selection.
///
/// Weight orientation is fixed as `w_enc: [m, d_in]`, `w_dec: [d_in, m]`;
/// the learned feature directions are the columns of `w_dec` and are kept at
/// unit L2 norm after every optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub(crate) w_enc: Array2<f64>,
    pub(crate) b_enc: Array1<f64>,
    pub(crate) w_dec: Array2<f64>,
    pub(crate) b_dec: Array1<f64>,
    k_avg: usize,
    groups: Option<Vec<usize>>,
}

impl SaeModel {
    pub fn from_parts(
        w_enc: Array2<f64>,
        b_enc: Array1<f64>,
        w_dec: Array2<f64>,
        b_dec: Array1<f64>,
        k_avg: usize,
    ) -> Result<Self, SaeError> {
        let (m, d_in) = w_enc.dim();
        if w_dec.dim() != (d_in, m) || b_enc.len() != m || b_dec.len() != d_in {
            return Err(SaeError::ShapeMismatch {
                expected: format!("w_dec [{d_in}, {m}], b_enc [{m}], b_dec [{d_in}]"),
                got: format!(
                    "w_dec {:?}, b_enc [{}], b_dec [{}]",
                    w_dec.dim(),
                    b_enc.len(),
                    b_dec.len()
                ),
            });
        }
        if k_avg == 0 || k_avg > m {
            return Err(SaeError::BadConfig(format!(
                "k_avg must satisfy 0 < k_avg <= m, got k_avg={k_avg}, m={m}"
            )));
        }
        Ok(SaeModel {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            k_avg,
            groups: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn num_latents(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn k_avg(&self) -> usize {
        self.k_avg
    }

    pub fn set_k_avg(&mut self, k_avg: usize) -> Result<(), SaeError> {
        if k_avg == 0 || k_avg > self.num_latents() {
            return Err(SaeError::BadConfig(format!(
                "k_avg must satisfy 0 < k_avg <= m, got k_avg={k_avg}, m={}",
                self.num_latents()
            )));
        }
        self.k_avg = k_avg;
        Ok(())
    }

    pub fn w_enc(&self) -> &Array2<f64> {
        &self.w_enc
    }

    pub fn b_enc(&self) -> &Array1<f64> {
        &self.b_enc
    }

    pub fn w_dec(&self) -> &Array2<f64> {
        &self.w_dec
    }

    pub fn b_dec(&self) -> &Array1<f64> {
        &self.b_dec
    }

    /// Decoder direction of latent `k` (a `w_dec` column).
    pub fn decoder_direction(&self, k: usize) -> Array1<f64> {
        self.w_dec.column(k).to_owned()
    }

    pub fn group_sizes(&self) -> Option<&[usize]> {
        self.groups.as_deref()
    }

    /// Contiguous half-open latent ranges, one per group.
    pub fn group_ranges(&self) -> Option<Vec<std::ops::Range<usize>>> {
        self.groups.as_ref().map(|sizes| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for s in sizes {
                out.push(start..start + s);
                start += s;
            }
            out
        })
    }

    /// Partitions the latents into `n_groups` contiguous groups, as even as
    /// possible with earlier groups larger.
    pub fn set_groups(&mut self, n_groups: usize) -> Result<(), SaeError> {
        let m = self.num_latents();
        if n_groups == 0 || n_groups > m {
            return Err(SaeError::BadConfig(format!(
                "cannot split {m} latents into {n_groups} groups"
            )));
        }
        let base = m / n_groups;
        let rem = m % n_groups;
        if base == 0 {
            return Err(SaeError::BadConfig(format!(
                "cannot split {m} latents into {n_groups} nonempty groups"
            )));
        }
        self.groups = Some(
            (0..n_groups)
                .map(|i| base + usize::from(i < rem))
                .collect(),
        );
        Ok(())
    }

    pub(crate) fn set_groups_raw(&mut self, sizes: Vec<usize>) -> Result<(), SaeError> {
        if sizes.iter().sum::<usize>() != self.num_latents() || sizes.contains(&0) {
            return Err(SaeError::BadConfig(format!(
                "group sizes {sizes:?} do not partition {} latents",
                self.num_latents()
            )));
        }
        self.groups = Some(sizes);
        Ok(())
    }

    /// Encoder pre-activations `u = W_enc x + b_enc`, shape `[batch, m]`.
    pub fn pre_activations(&self, x: &Array2<f64>) -> Result<Array2<f64>, SaeError> {
        if x.ncols() != self.input_dim() {
            return Err(SaeError::ShapeMismatch {
                expected: format!("[_, {}]", self.input_dim()),
                got: format!("[_, {}]", x.ncols()),
            });
        }
        Ok(&x.dot(&self.w_enc.t()) + &self.b_enc)
    }

    /// `x_rec = W_dec h + b_dec`, shape `[batch, d_in]`.
    pub fn decode(&self, code: &Array2<f64>) -> Result<Array2<f64>, SaeError> {
        if code.ncols() != self.num_latents() {
            return Err(SaeError::ShapeMismatch {
                expected: format!("[_, {}]", self.num_latents()),
                got: format!("[_, {}]", code.ncols()),
            });
        }
        Ok(&code.dot(&self.w_dec.t()) + &self.b_dec)
    }

    /// Forward pass at the model's own sparsity: `(code, reconstruction)`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>), SaeError> {
        self.forward_with_k(x, self.k_avg)
    }

    /// Forward pass at an explicit batch-average sparsity budget.
    pub fn forward_with_k(
        &self,
        x: &Array2<f64>,
        k_avg: usize,
    ) -> Result<(Array2<f64>, Array2<f64>), SaeError> {
        let pre = self.pre_activations(x)?;
        let code = batchtopk_select(&pre, k_avg);
        let rec = self.decode(&code)?;
        Ok((code, rec))
    }
}

/// BatchTopK selection: ReLU first, then keep exactly
/// `min(batch * k_avg, #strictly-positive entries)` of the largest values
/// across the whole batch, ties broken by ascending flat `(row, col)` index.
/// Everything else is zeroed. Returns the sparse code; kept entries are
/// exactly the strictly positive outputs.
pub fn batchtopk_select(pre_acts: &Array2<f64>, k_avg: usize) -> Array2<f64> {
    let (b, m) = pre_acts.dim();
    let budget = b.saturating_mul(k_avg);
    let mut positives: Vec<(f64, usize)> = Vec::new();
    for (flat, v) in pre_acts.iter().enumerate() {
        if *v > 0.0 {
            positives.push((*v, flat));
        }
    }
    let kept: &[(f64, usize)] = if positives.len() <= budget {
        &positives
    } else {
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
        };
        positives.select_nth_unstable_by(budget - 1, cmp);
        &positives[..budget]
    };
    let mut out = Array2::<f64>::zeros((b, m));
    for (v, flat) in kept {
        out[(flat / m, flat % m)] = *v;
    }
    out
}

/// Kaiming-style initialization: fan-in-scaled normal weights, zero biases,
/// unit-norm decoder columns. Deterministic per seed.
pub fn init_model(d_in: usize, m: usize, k_avg: usize, seed: u64) -> Result<SaeModel, SaeError> {
    if d_in == 0 || m == 0 {
        return Err(SaeError::BadConfig(format!(
            "dimensions must be positive, got d_in={d_in}, m={m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc_std = (2.0 / d_in as f64).sqrt();
    let dec_std = (2.0 / m as f64).sqrt();
    let w_enc = Array2::from_shape_fn((m, d_in), |_| {
        rng.sample::<f64, _>(StandardNormal) * enc_std
    });
    let mut w_dec = Array2::from_shape_fn((d_in, m), |_| {
        rng.sample::<f64, _>(StandardNormal) * dec_std
    });
    for c in 0..m {
        let norm = w_dec.column(c).dot(&w_dec.column(c)).sqrt();
        if norm > 0.0 {
            let scaled = &w_dec.column(c) / norm;
            w_dec.column_mut(c).assign(&scaled);
        }
    }
    SaeModel::from_parts(w_enc, Array1::zeros(m), w_dec, Array1::zeros(d_in), k_avg)
}

/// Lossless pass-through model: `m = 2 * d_in` latents encode `(x, -x)`, so
/// the ReLU code decodes back to `x` exactly at full sparsity budget. Useful
/// as the "perfect codes" bound in reconstruction diagnostics.
pub fn identity_model(d_in: usize) -> SaeModel {
    let m = 2 * d_in;
    let mut w_enc = Array2::<f64>::zeros((m, d_in));
    let mut w_dec = Array2::<f64>::zeros((d_in, m));
    for c in 0..d_in {
        w_enc[(c, c)] = 1.0;
        w_enc[(d_in + c, c)] = -1.0;
        w_dec[(c, c)] = 1.0;
        w_dec[(c, d_in + c)] = -1.0;
    }
    SaeModel::from_parts(w_enc, Array1::zeros(m), w_dec, Array1::zeros(d_in), m)
        .expect("identity model dimensions are consistent")
}

/// Resamples a decoder column from the init distribution; used when a column
/// collapses to zero norm.
pub(crate) fn resample_decoder_column<R: Rng>(model: &mut SaeModel, col: usize, rng: &mut R) {
    let m = model.num_latents();
    let dec_std = (2.0 / m as f64).sqrt();
    let mut v = Array1::from_iter(
        (0..model.input_dim()).map(|_| rng.sample::<f64, _>(StandardNormal) * dec_std),
    );
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v /= norm;
    } else {
        v[0] = 1.0;
    }
    model.w_dec.column_mut(col).assign(&v);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn batchtopk_keeps_exactly_the_largest() {
        let pre = array![[0.5, 0.2, 0.0], [0.9, 0.1, 0.3]];
        let code = batchtopk_select(&pre, 1);
        assert_eq!(code, array![[0.5, 0.0, 0.0], [0.9, 0.0, 0.0]]);
    }

    #[test]
    fn batchtopk_empty_when_nothing_positive() {
        let pre = array![[-0.5, 0.0], [-0.1, -2.0]];
        let code = batchtopk_select(&pre, 2);
        assert!(code.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batchtopk_with_full_budget_is_relu() {
        let pre = array![[0.5, -0.2, 0.1], [-0.9, 0.4, 0.3]];
        let code = batchtopk_select(&pre, 3);
        let relu = pre.mapv(|v| v.max(0.0));
        assert_eq!(code, relu);
    }

    #[test]
    fn batchtopk_breaks_ties_by_flat_index() {
        let pre = array![[1.0, 1.0], [1.0, 1.0]];
        let code = batchtopk_select(&pre, 1);
        // budget 2, four tied entries: flat indices 0 and 1 win
        assert_eq!(code, array![[1.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn forward_constant_decoder_bias() {
        let model = SaeModel::from_parts(
            Array2::zeros((2, 3)),
            Array1::zeros(2),
            Array2::zeros((3, 2)),
            array![7.0, -1.0, 0.5],
            1,
        )
        .unwrap();
        let x = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let (_, rec) = model.forward(&x).unwrap();
        for row in rec.rows() {
            assert_eq!(row.to_vec(), vec![7.0, -1.0, 0.5]);
        }
    }

    #[test]
    fn forward_identity_toy() {
        let model = SaeModel::from_parts(
            array![[1.0]],
            array![0.0],
            array![[1.0]],
            array![0.0],
            1,
        )
        .unwrap();
        let x = array![[2.0]];
        let (code, rec) = model.forward(&x).unwrap();
        assert_eq!(code[(0, 0)], 2.0);
        assert_eq!(rec[(0, 0)], 2.0);
    }

    #[test]
    fn forward_matches_naive_matmul_oracle() {
        let model = init_model(5, 8, 3, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Array2::from_shape_fn((4, 5), |_| rng.sample::<f64, _>(StandardNormal));
        let (code, rec) = model.forward(&x).unwrap();

        // naive re-implementation
        let (b, m, d) = (4, 8, 5);
        let mut pre = Array2::<f64>::zeros((b, m));
        for q in 0..b {
            for j in 0..m {
                let mut s = model.b_enc()[j];
                for c in 0..d {
                    s += model.w_enc()[(j, c)] * x[(q, c)];
                }
                pre[(q, j)] = s;
            }
        }
        let naive_code = batchtopk_select(&pre, 3);
        let mut naive_rec = Array2::<f64>::zeros((b, d));
        for q in 0..b {
            for c in 0..d {
                let mut s = model.b_dec()[c];
                for j in 0..m {
                    s += model.w_dec()[(c, j)] * naive_code[(q, j)];
                }
                naive_rec[(q, c)] = s;
            }
        }
        let max_code = (&code - &naive_code).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let max_rec = (&rec - &naive_rec).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max_code <= 1e-12 && max_rec <= 1e-12, "{max_code} {max_rec}");
    }

    #[test]
    fn init_is_deterministic_with_unit_decoder_columns() {
        let a = init_model(6, 10, 2, 99).unwrap();
        let b = init_model(6, 10, 2, 99).unwrap();
        assert_eq!(a, b);
        for c in 0..10 {
            let norm = a.w_dec().column(c).dot(&a.w_dec().column(c)).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        let c = init_model(6, 10, 2, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn expansion_half_maps_6400_to_3200() {
        // expansion factor 0.5 on the full-scale concatenated input
        let d_in = 6400;
        let m = (d_in as f64 * 0.5) as usize;
        assert_eq!(m, 3200);
        // five timestep groups of 640 latents each at that scale
        let mut model = init_model(4, 3200, 50, 0).unwrap();
        model.set_groups(5).unwrap();
        assert_eq!(model.group_sizes().unwrap(), &[640; 5]);
    }

    #[test]
    fn groups_partition_with_remainder_to_earliest() {
        let mut model = init_model(4, 11, 2, 0).unwrap();
        model.set_groups(3).unwrap();
        assert_eq!(model.group_sizes().unwrap(), &[4, 4, 3]);
        let ranges = model.group_ranges().unwrap();
        assert_eq!(ranges[0], 0..4);
        assert_eq!(ranges[2], 8..11);
    }

    #[test]
    fn k_avg_bounds_are_enforced() {
        assert!(init_model(4, 4, 0, 0).is_err());
        assert!(init_model(4, 4, 5, 0).is_err());
        assert!(init_model(4, 4, 4, 0).is_ok());
    }
}
