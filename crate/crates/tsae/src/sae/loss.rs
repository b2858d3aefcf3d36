//! Loss values and hand-derived gradients for the BatchTopK and Matryoshka
//! objectives.
//!
//! The reconstruction term sums squared errors over the batch; the auxiliary
//! dead-latent term is a mean over all batch-by-dim elements. Both TopK
//! selections (main and auxiliary) are treated as constants of the loss:
//! gradients are straight-through on the kept set and zero elsewhere. The
//! `*_given_masks` entry points evaluate the loss at fixed selections, which
//! is exactly the smooth function the finite-difference oracle perturbs.

use ndarray::{Array1, Array2, Axis};

use super::{batchtopk_select, SaeError, SaeModel};

/// One training batch plus the auxiliary-loss context.
pub struct LossBatch<'a> {
    pub x: &'a Array2<f64>,
    /// Auxiliary loss weight (beta).
    pub aux_weight: f64,
    /// Per-sample TopK budget for the auxiliary reconstruction.
    pub aux_topk: usize,
    /// `dead[j]` marks latent `j` as not fired for at least the dead
    /// threshold number of optimizer steps.
    pub dead: &'a [bool],
}

/// Frozen selection state: the main BatchTopK mask and, when the auxiliary
/// loss is active, the per-sample dead-latent mask.
#[derive(Debug, Clone)]
pub struct SelectionMasks {
    pub topk: Array2<f64>,
    pub aux: Option<Array2<f64>>,
}

impl SelectionMasks {
    /// Latents that fired in this batch (kept by either selection).
    pub fn fired(&self) -> Vec<bool> {
        let m = self.topk.ncols();
        let mut fired = vec![false; m];
        for row in self.topk.rows() {
            for (j, v) in row.iter().enumerate() {
                if *v != 0.0 {
                    fired[j] = true;
                }
            }
        }
        if let Some(aux) = &self.aux {
            for row in aux.rows() {
                for (j, v) in row.iter().enumerate() {
                    if *v != 0.0 {
                        fired[j] = true;
                    }
                }
            }
        }
        fired
    }
}

/// Gradients of the total loss with respect to the four parameter tensors.
#[derive(Debug, Clone)]
pub struct SaeGradients {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

impl SaeGradients {
    pub fn zeros_like(model: &SaeModel) -> Self {
        SaeGradients {
            w_enc: Array2::zeros(model.w_enc.raw_dim()),
            b_enc: Array1::zeros(model.b_enc.len()),
            w_dec: Array2::zeros(model.w_dec.raw_dim()),
            b_dec: Array1::zeros(model.b_dec.len()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.w_enc
            .iter()
            .chain(self.b_enc.iter())
            .chain(self.w_dec.iter())
            .chain(self.b_dec.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

fn check_batch(model: &SaeModel, batch: &LossBatch) -> Result<(), SaeError> {
    if batch.x.nrows() == 0 {
        return Err(SaeError::BadConfig("empty batch".into()));
    }
    if batch.x.ncols() != model.input_dim() {
        return Err(SaeError::ShapeMismatch {
            expected: format!("[_, {}]", model.input_dim()),
            got: format!("[_, {}]", batch.x.ncols()),
        });
    }
    if batch.dead.len() != model.num_latents() {
        return Err(SaeError::ShapeMismatch {
            expected: format!("dead mask of length {}", model.num_latents()),
            got: format!("length {}", batch.dead.len()),
        });
    }
    Ok(())
}

/// Per-sample TopK over dead latents by post-ReLU pre-activation; the kept
/// entries carry the ReLU'd values.
fn aux_select(pre: &Array2<f64>, dead: &[bool], aux_topk: usize) -> Array2<f64> {
    let (b, m) = pre.dim();
    let mut out = Array2::<f64>::zeros((b, m));
    for q in 0..b {
        let mut cands: Vec<(f64, usize)> = (0..m)
            .filter(|j| dead[*j] && pre[(q, *j)] > 0.0)
            .map(|j| (pre[(q, j)], j))
            .collect();
        if cands.len() > aux_topk {
            let cmp =
                |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            cands.select_nth_unstable_by(aux_topk - 1, cmp);
            cands.truncate(aux_topk);
        }
        for (v, j) in cands {
            out[(q, j)] = v;
        }
    }
    out
}

/// Computes the frozen selections for a batch at the current parameters.
pub fn selection_masks(model: &SaeModel, batch: &LossBatch) -> Result<SelectionMasks, SaeError> {
    check_batch(model, batch)?;
    let pre = model.pre_activations(batch.x)?;
    let topk = batchtopk_select(&pre, model.k_avg());
    let aux = if batch.aux_weight > 0.0 && batch.dead.iter().any(|d| *d) {
        Some(aux_select(&pre, batch.dead, batch.aux_topk))
    } else {
        None
    };
    Ok(SelectionMasks { topk, aux })
}

fn mask_of(code: &Array2<f64>) -> Array2<f64> {
    code.mapv(|v| f64::from(v != 0.0))
}

/// Auxiliary dead-latent loss: mean squared error of reconstructing the
/// residual `e = x - x_rec` from the per-sample top-`aux_topk` dead latents.
/// Returns 0 when no latent is dead.
pub fn aux_loss(
    model: &SaeModel,
    x: &Array2<f64>,
    x_rec: &Array2<f64>,
    dead: &[bool],
    aux_topk: usize,
) -> Result<f64, SaeError> {
    if !dead.iter().any(|d| *d) {
        return Ok(0.0);
    }
    let pre = model.pre_activations(x)?;
    let h_aux = aux_select(&pre, dead, aux_topk);
    let e_hat = h_aux.dot(&model.w_dec.t());
    let e = x - x_rec;
    let n = e.len() as f64;
    Ok((&e - &e_hat).iter().map(|v| v * v).sum::<f64>() / n)
}

/// Loss at frozen selections: smooth in the parameters, used both for the
/// returned loss value and for finite-difference verification.
pub fn loss_given_masks(
    model: &SaeModel,
    batch: &LossBatch,
    masks: &SelectionMasks,
) -> Result<f64, SaeError> {
    let pre = model.pre_activations(batch.x)?;
    let h = &mask_of(&masks.topk) * &pre;
    let x_rec = model.decode(&h)?;
    let mut loss = (batch.x - &x_rec).iter().map(|v| v * v).sum::<f64>();
    if let Some(aux) = &masks.aux {
        let h_aux = &mask_of(aux) * &pre;
        let e_hat = h_aux.dot(&model.w_dec.t());
        let e = batch.x - &x_rec;
        let n = e.len() as f64;
        loss += batch.aux_weight * (&e - &e_hat).iter().map(|v| v * v).sum::<f64>() / n;
    }
    Ok(loss)
}

/// Total loss and manual gradients for the standard BatchTopK objective.
pub fn loss_and_grads(
    model: &SaeModel,
    batch: &LossBatch,
) -> Result<(f64, SaeGradients), SaeError> {
    let masks = selection_masks(model, batch)?;
    loss_and_grads_given(model, batch, &masks)
}

/// As [`loss_and_grads`] but with the selections supplied by the caller (the
/// training loop reuses them for dead-latent bookkeeping).
pub fn loss_and_grads_given(
    model: &SaeModel,
    batch: &LossBatch,
    masks: &SelectionMasks,
) -> Result<(f64, SaeGradients), SaeError> {
    let pre = model.pre_activations(batch.x)?;
    let topk_mask = mask_of(&masks.topk);
    let h = &topk_mask * &pre;
    let x_rec = model.decode(&h)?;
    let diff = &x_rec - batch.x;
    let mut loss = diff.iter().map(|v| v * v).sum::<f64>();

    // d(loss)/d(x_rec), accumulated across the reconstruction and aux terms
    let mut g_xrec = diff.mapv(|v| 2.0 * v);
    let mut grads = SaeGradients::zeros_like(model);
    let mut d_u = Array2::<f64>::zeros(pre.raw_dim());

    if let Some(aux) = &masks.aux {
        let aux_mask = mask_of(aux);
        let h_aux = &aux_mask * &pre;
        let e_hat = h_aux.dot(&model.w_dec.t());
        let e = -&diff; // x - x_rec
        let n = e.len() as f64;
        let gap = &e - &e_hat;
        loss += batch.aux_weight * gap.iter().map(|v| v * v).sum::<f64>() / n;
        // shared upstream term for both the e path (via x_rec) and the e_hat path
        let aux_g = gap.mapv(|v| -batch.aux_weight * 2.0 / n * v);
        g_xrec += &aux_g;
        grads.w_dec = grads.w_dec + aux_g.t().dot(&h_aux);
        d_u = d_u + &aux_mask * &aux_g.dot(&model.w_dec);
    }

    grads.w_dec = grads.w_dec + g_xrec.t().dot(&h);
    grads.b_dec = g_xrec.sum_axis(Axis(0));
    d_u = d_u + &topk_mask * &g_xrec.dot(&model.w_dec);
    grads.w_enc = d_u.t().dot(batch.x);
    grads.b_enc = d_u.sum_axis(Axis(0));

    if !loss.is_finite() {
        return Err(SaeError::NonFiniteLoss { epoch: 0, step: 0 });
    }
    Ok((loss, grads))
}

/// Matryoshka prefix loss at frozen selections.
///
/// `x_rec_{-1} = b_dec`; prefix `j` adds decoder contributions of groups
/// `0..=j`; the loss averages the full-input squared error over all `T + 1`
/// prefixes, plus the auxiliary term on the full reconstruction.
pub fn matryoshka_loss_given_masks(
    model: &SaeModel,
    batch: &LossBatch,
    masks: &SelectionMasks,
) -> Result<f64, SaeError> {
    let ranges = model.group_ranges().ok_or(SaeError::GroupsRequired)?;
    let pre = model.pre_activations(batch.x)?;
    let h = &mask_of(&masks.topk) * &pre;
    let n_prefix = ranges.len() + 1;
    let b = batch.x.nrows();
    let mut x_rec = Array2::<f64>::zeros((b, model.input_dim())) + &model.b_dec;
    let mut total = (batch.x - &x_rec).iter().map(|v| v * v).sum::<f64>();
    for r in &ranges {
        let h_g = h.slice(ndarray::s![.., r.clone()]);
        let w_g = model.w_dec.slice(ndarray::s![.., r.clone()]);
        x_rec = &x_rec + &h_g.dot(&w_g.t());
        total += (batch.x - &x_rec).iter().map(|v| v * v).sum::<f64>();
    }
    let mut loss = total / n_prefix as f64;
    if let Some(aux) = &masks.aux {
        let h_aux = &mask_of(aux) * &pre;
        let e_hat = h_aux.dot(&model.w_dec.t());
        let e = batch.x - &x_rec;
        let n = e.len() as f64;
        loss += batch.aux_weight * (&e - &e_hat).iter().map(|v| v * v).sum::<f64>() / n;
    }
    Ok(loss)
}

/// Total loss and manual gradients for the Matryoshka objective.
pub fn matryoshka_loss_and_grads(
    model: &SaeModel,
    batch: &LossBatch,
) -> Result<(f64, SaeGradients), SaeError> {
    let masks = selection_masks(model, batch)?;
    matryoshka_loss_and_grads_given(model, batch, &masks)
}

pub fn matryoshka_loss_and_grads_given(
    model: &SaeModel,
    batch: &LossBatch,
    masks: &SelectionMasks,
) -> Result<(f64, SaeGradients), SaeError> {
    let ranges = model.group_ranges().ok_or(SaeError::GroupsRequired)?;
    check_batch(model, batch)?;
    let pre = model.pre_activations(batch.x)?;
    let topk_mask = mask_of(&masks.topk);
    let h = &topk_mask * &pre;
    let n_groups = ranges.len();
    let n_prefix = n_groups + 1;
    let scale = 2.0 / n_prefix as f64;
    let b = batch.x.nrows();

    // prefix residuals r_j = x_rec_j - x for j = -1..n_groups-1
    let mut residuals: Vec<Array2<f64>> = Vec::with_capacity(n_prefix);
    let mut x_rec = Array2::<f64>::zeros((b, model.input_dim())) + &model.b_dec;
    residuals.push(&x_rec - batch.x);
    for r in &ranges {
        let h_g = h.slice(ndarray::s![.., r.clone()]);
        let w_g = model.w_dec.slice(ndarray::s![.., r.clone()]);
        x_rec = &x_rec + &h_g.dot(&w_g.t());
        residuals.push(&x_rec - batch.x);
    }
    let mut loss = residuals
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n_prefix as f64;

    let mut grads = SaeGradients::zeros_like(model);
    let mut d_u = Array2::<f64>::zeros(pre.raw_dim());

    // auxiliary term rides on the full reconstruction
    let mut aux_g: Option<Array2<f64>> = None;
    if let Some(aux) = &masks.aux {
        let aux_mask = mask_of(aux);
        let h_aux = &aux_mask * &pre;
        let e_hat = h_aux.dot(&model.w_dec.t());
        let e = -&residuals[n_groups]; // x - x_rec_full
        let n = e.len() as f64;
        let gap = &e - &e_hat;
        loss += batch.aux_weight * gap.iter().map(|v| v * v).sum::<f64>() / n;
        let g = gap.mapv(|v| -batch.aux_weight * 2.0 / n * v);
        grads.w_dec = grads.w_dec + g.t().dot(&h_aux);
        d_u = d_u + &aux_mask * &g.dot(&model.w_dec);
        aux_g = Some(g);
    }

    // b_dec sees every prefix (plus the aux path through the full rec)
    let mut b_dec_g = Array2::<f64>::zeros((b, model.input_dim()));
    for r in &residuals {
        b_dec_g += &r.mapv(|v| scale * v);
    }
    if let Some(g) = &aux_g {
        b_dec_g += g;
    }
    grads.b_dec = b_dec_g.sum_axis(Axis(0));

    // group i contributes to prefixes j >= i: accumulate suffix sums from the
    // last group backwards
    let mut upstream = match &aux_g {
        Some(g) => g.clone(),
        None => Array2::<f64>::zeros((b, model.input_dim())),
    };
    let mut d_h = Array2::<f64>::zeros(h.raw_dim());
    for (i, r) in ranges.iter().enumerate().rev() {
        upstream += &residuals[i + 1].mapv(|v| scale * v);
        let h_g = h.slice(ndarray::s![.., r.clone()]);
        let w_g = model.w_dec.slice(ndarray::s![.., r.clone()]);
        let dw = upstream.t().dot(&h_g);
        grads
            .w_dec
            .slice_mut(ndarray::s![.., r.clone()])
            .zip_mut_with(&dw, |a, b| *a += b);
        d_h.slice_mut(ndarray::s![.., r.clone()])
            .assign(&upstream.dot(&w_g));
    }
    d_u = d_u + &topk_mask * &d_h;
    grads.w_enc = d_u.t().dot(batch.x);
    grads.b_enc = d_u.sum_axis(Axis(0));

    if !loss.is_finite() {
        return Err(SaeError::NonFiniteLoss { epoch: 0, step: 0 });
    }
    Ok((loss, grads))
}
