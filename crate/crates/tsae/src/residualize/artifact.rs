//! The `.ridge` preprocessing sidecar.
//!
//! Carries everything fitted on the training split that downstream stages
//! need: the per-timestep activation normalizer, the ridge chain, and the
//! per-component normalizers for both the residualized and the raw SAE-input
//! layouts. All payload scalars are f64 little-endian.
//!
//! ```text
//! magic "RDGE" | version u32 | T u32 | d u32 | lambda f64
//! | act mu (T*d) | act sigma (T*d)
//! | per transition: W (d*d row-major) | b (d)
//! | resid-component mu (T*d) | sigma (T*d)
//! | raw-component mu (T*d) | sigma (T*d)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{ResidualizeError, RidgeChain, TimestepNormalizer};
use crate::wire::{FormatError, Reader, Writer};

pub const RIDGE_MAGIC: [u8; 4] = *b"RDGE";
pub const RIDGE_VERSION: u32 = 1;

/// Train-split preprocessing state shared by every downstream stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessArtifact {
    pub act_norm: TimestepNormalizer,
    pub chain: RidgeChain,
    /// Component normalizer for residualized inputs: block 0 anchors, blocks
    /// 1.. are ridge residuals.
    pub comp_resid: TimestepNormalizer,
    /// Component normalizer for raw (non-residualized) inputs.
    pub comp_raw: TimestepNormalizer,
}

impl PreprocessArtifact {
    pub fn num_timesteps(&self) -> usize {
        self.act_norm.num_timesteps()
    }

    pub fn dim(&self) -> usize {
        self.act_norm.dim()
    }

    /// The component normalizer matching an input spec.
    pub fn component_normalizer(&self, residualized: bool) -> &TimestepNormalizer {
        if residualized {
            &self.comp_resid
        } else {
            &self.comp_raw
        }
    }
}

fn push_normalizer(w: &mut Writer, norm: &TimestepNormalizer) {
    w.f64_iter(norm.mu().iter().copied());
    w.f64_iter(norm.sigma().iter().copied());
}

fn read_normalizer(
    r: &mut Reader,
    t: usize,
    d: usize,
    label: &'static str,
) -> Result<TimestepNormalizer, FormatError> {
    let mu = r.f64_vec(t * d)?;
    let sigma = r.f64_vec(t * d)?;
    if !mu.iter().all(|v| v.is_finite()) {
        return Err(FormatError::NonFinite(label));
    }
    if !sigma.iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err(FormatError::invalid(label, "sigma must be finite and > 0"));
    }
    Ok(TimestepNormalizer::from_parts(
        Array2::from_shape_vec((t, d), mu).unwrap(),
        Array2::from_shape_vec((t, d), sigma).unwrap(),
    ))
}

pub fn write_preprocess(art: &PreprocessArtifact) -> Vec<u8> {
    let t = art.num_timesteps();
    let d = art.dim();
    let mut w = Writer::new();
    w.magic(RIDGE_MAGIC)
        .u32(RIDGE_VERSION)
        .u32(t as u32)
        .u32(d as u32)
        .f64(art.chain.lambda());
    push_normalizer(&mut w, &art.act_norm);
    for i in 0..t - 1 {
        w.f64_iter(art.chain.weight(i).iter().copied());
        w.f64_iter(art.chain.bias(i).iter().copied());
    }
    push_normalizer(&mut w, &art.comp_resid);
    push_normalizer(&mut w, &art.comp_raw);
    w.into_bytes()
}

pub fn read_preprocess(bytes: &[u8]) -> Result<PreprocessArtifact, ResidualizeError> {
    let mut r = Reader::new(bytes);
    r.magic(RIDGE_MAGIC)?;
    r.version(RIDGE_VERSION)?;
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    if t < 2 || d == 0 {
        return Err(FormatError::invalid("dimensions", format!("T={t}, d={d}")).into());
    }
    t.checked_mul(d)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| FormatError::invalid("dimensions", "T*d overflows"))?;
    let lambda = r.f64()?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(FormatError::invalid("lambda", format!("{lambda}")).into());
    }
    let act_norm = read_normalizer(&mut r, t, d, "activation normalizer")?;
    let mut weights = Vec::with_capacity(t - 1);
    let mut biases = Vec::with_capacity(t - 1);
    for _ in 1..t {
        let w_vals = r.f64_vec(d * d)?;
        let b_vals = r.f64_vec(d)?;
        if !w_vals.iter().chain(b_vals.iter()).all(|v| v.is_finite()) {
            return Err(FormatError::NonFinite("ridge chain").into());
        }
        weights.push(Array2::from_shape_vec((d, d), w_vals).unwrap());
        biases.push(Array1::from_vec(b_vals));
    }
    let comp_resid = read_normalizer(&mut r, t, d, "residual component normalizer")?;
    let comp_raw = read_normalizer(&mut r, t, d, "raw component normalizer")?;
    r.finish()?;
    Ok(PreprocessArtifact {
        act_norm,
        chain: RidgeChain::from_parts(weights, biases, lambda),
        comp_resid,
        comp_raw,
    })
}

pub fn save_preprocess(art: &PreprocessArtifact, path: impl AsRef<Path>) -> Result<(), ResidualizeError> {
    fs::write(path, write_preprocess(art))?;
    Ok(())
}

pub fn load_preprocess(path: impl AsRef<Path>) -> Result<PreprocessArtifact, ResidualizeError> {
    read_preprocess(&fs::read(path)?)
}
