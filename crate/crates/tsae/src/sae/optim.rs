//! Adam with bias correction, optional decoupled weight decay, and decoder
//! column renormalization after every step.

use ndarray::{Array1, Array2};
use rand::Rng;

use super::loss::SaeGradients;
use super::{resample_decoder_column, SaeModel};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates shaped like the model parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_w_enc: Array2<f64>,
    v_w_enc: Array2<f64>,
    m_b_enc: Array1<f64>,
    v_b_enc: Array1<f64>,
    m_w_dec: Array2<f64>,
    v_w_dec: Array2<f64>,
    m_b_dec: Array1<f64>,
    v_b_dec: Array1<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &SaeModel) -> Self {
        AdamState {
            m_w_enc: Array2::zeros(model.w_enc.raw_dim()),
            v_w_enc: Array2::zeros(model.w_enc.raw_dim()),
            m_b_enc: Array1::zeros(model.b_enc.len()),
            v_b_enc: Array1::zeros(model.b_enc.len()),
            m_w_dec: Array2::zeros(model.w_dec.raw_dim()),
            v_w_dec: Array2::zeros(model.w_dec.raw_dim()),
            m_b_dec: Array1::zeros(model.b_dec.len()),
            v_b_dec: Array1::zeros(model.b_dec.len()),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

#[allow(clippy::too_many_arguments)]
fn update_tensor(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    bias1: f64,
    bias2: f64,
    weight_decay: f64,
) {
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        if weight_decay > 0.0 {
            param[i] -= lr * weight_decay * param[i];
        }
        param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// One bias-corrected Adam step over all four parameter tensors. Weight
/// decay, when nonzero, is decoupled and applies to the weight matrices only.
pub fn adam_step(
    model: &mut SaeModel,
    grads: &SaeGradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    state.step += 1;
    let bias1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    update_tensor(
        model.w_enc.as_slice_mut().unwrap(),
        grads.w_enc.as_slice().unwrap(),
        state.m_w_enc.as_slice_mut().unwrap(),
        state.v_w_enc.as_slice_mut().unwrap(),
        lr,
        bias1,
        bias2,
        weight_decay,
    );
    update_tensor(
        model.b_enc.as_slice_mut().unwrap(),
        grads.b_enc.as_slice().unwrap(),
        state.m_b_enc.as_slice_mut().unwrap(),
        state.v_b_enc.as_slice_mut().unwrap(),
        lr,
        bias1,
        bias2,
        0.0,
    );
    update_tensor(
        model.w_dec.as_slice_mut().unwrap(),
        grads.w_dec.as_slice().unwrap(),
        state.m_w_dec.as_slice_mut().unwrap(),
        state.v_w_dec.as_slice_mut().unwrap(),
        lr,
        bias1,
        bias2,
        weight_decay,
    );
    update_tensor(
        model.b_dec.as_slice_mut().unwrap(),
        grads.b_dec.as_slice().unwrap(),
        state.m_b_dec.as_slice_mut().unwrap(),
        state.v_b_dec.as_slice_mut().unwrap(),
        lr,
        bias1,
        bias2,
        0.0,
    );
}

/// Rescales every decoder column to unit L2 norm. Columns that collapsed to
/// zero are resampled from the init distribution before normalizing.
pub fn renormalize_decoder<R: Rng>(model: &mut SaeModel, rng: &mut R) {
    for c in 0..model.num_latents() {
        let norm = model.w_dec.column(c).dot(&model.w_dec.column(c)).sqrt();
        if norm <= 1e-300 || !norm.is_finite() {
            resample_decoder_column(model, c, rng);
        } else {
            let scaled = &model.w_dec.column(c) / norm;
            model.w_dec.column_mut(c).assign(&scaled);
        }
    }
}
