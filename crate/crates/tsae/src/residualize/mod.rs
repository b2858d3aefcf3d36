//! Per-timestep normalization, closed-form ridge fitting between neighboring
//! timestep blocks, residual construction, and SAE-input assembly for the
//! four model variants.

mod artifact;

pub use artifact::{
    load_preprocess, read_preprocess, save_preprocess, write_preprocess, PreprocessArtifact,
    RIDGE_MAGIC,
};

use ndarray::{Array1, Array2, Array3, Axis};
use thiserror::Error;

use crate::dataset::TrajectoryDataset;
use crate::linalg::{solve_spd, LinalgError};
use crate::wire::FormatError;

/// Ridge penalty used throughout the reference configuration.
pub const DEFAULT_RIDGE_LAMBDA: f64 = 0.1;

/// Standard deviations below this are clamped so constant coordinates stay
/// finite under normalization.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ResidualizeError {
    #[error("need at least two samples to fit statistics, got {0}")]
    NotEnoughSamples(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error(
        "normal equations singular at transition {transition}; \
         the data is rank deficient, use lambda > 0"
    )]
    Singular { transition: usize },
    #[error("lambda must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("residualized inputs require a fitted ridge chain")]
    ChainRequired,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn shape_err(expected: impl ToString, got: impl ToString) -> ResidualizeError {
    ResidualizeError::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

/// Per-timestep, per-coordinate affine normalizer. Used both for raw
/// activation blocks and for the second, per-component normalization of SAE
/// inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepNormalizer {
    mu: Array2<f64>,
    sigma: Array2<f64>,
}

impl TimestepNormalizer {
    /// Population statistics over axis 0 of `[n, t, d]` data, fitted on the
    /// training split only.
    pub fn fit(data: &Array3<f64>) -> Result<Self, ResidualizeError> {
        let (n, t, d) = data.dim();
        if n < 2 {
            return Err(ResidualizeError::NotEnoughSamples(n));
        }
        let mut mu = Array2::<f64>::zeros((t, d));
        let mut sigma = Array2::<f64>::zeros((t, d));
        for i in 0..t {
            let block = data.index_axis(Axis(1), i);
            let m = block.mean_axis(Axis(0)).unwrap();
            let mut var = Array1::<f64>::zeros(d);
            for row in block.rows() {
                for (c, v) in row.iter().enumerate() {
                    let centered = v - m[c];
                    var[c] += centered * centered;
                }
            }
            var /= n as f64;
            mu.row_mut(i).assign(&m);
            sigma
                .row_mut(i)
                .assign(&var.mapv(|v| v.sqrt().max(SIGMA_FLOOR)));
        }
        Ok(TimestepNormalizer { mu, sigma })
    }

    pub fn from_parts(mu: Array2<f64>, sigma: Array2<f64>) -> Self {
        assert_eq!(mu.dim(), sigma.dim());
        TimestepNormalizer { mu, sigma }
    }

    pub fn num_timesteps(&self) -> usize {
        self.mu.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }

    pub fn mu(&self) -> &Array2<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &Array2<f64> {
        &self.sigma
    }

    fn check_block(&self, block: &Array2<f64>, i: usize) -> Result<(), ResidualizeError> {
        if i >= self.num_timesteps() || block.ncols() != self.dim() {
            return Err(shape_err(
                format!("[_, {}] block with i < {}", self.dim(), self.num_timesteps()),
                format!("[_, {}] block at i = {}", block.ncols(), i),
            ));
        }
        Ok(())
    }

    pub fn apply_block(&self, block: &Array2<f64>, i: usize) -> Result<Array2<f64>, ResidualizeError> {
        self.check_block(block, i)?;
        Ok((block - &self.mu.row(i)) / self.sigma.row(i))
    }

    pub fn invert_block(&self, block: &Array2<f64>, i: usize) -> Result<Array2<f64>, ResidualizeError> {
        self.check_block(block, i)?;
        Ok(&(block * &self.sigma.row(i)) + &self.mu.row(i))
    }

    pub fn apply(&self, data: &Array3<f64>) -> Result<Array3<f64>, ResidualizeError> {
        let (_, t, d) = data.dim();
        if (t, d) != self.mu.dim() {
            return Err(shape_err(
                format!("[_, {}, {}]", self.num_timesteps(), self.dim()),
                format!("[_, {t}, {d}]"),
            ));
        }
        let mut out = data.clone();
        for i in 0..t {
            let norm = self.apply_block(&data.index_axis(Axis(1), i).to_owned(), i)?;
            out.index_axis_mut(Axis(1), i).assign(&norm);
        }
        Ok(out)
    }

    pub fn invert(&self, data: &Array3<f64>) -> Result<Array3<f64>, ResidualizeError> {
        let (_, t, d) = data.dim();
        if (t, d) != self.mu.dim() {
            return Err(shape_err(
                format!("[_, {}, {}]", self.num_timesteps(), self.dim()),
                format!("[_, {t}, {d}]"),
            ));
        }
        let mut out = data.clone();
        for i in 0..t {
            let raw = self.invert_block(&data.index_axis(Axis(1), i).to_owned(), i)?;
            out.index_axis_mut(Axis(1), i).assign(&raw);
        }
        Ok(out)
    }
}

pub fn fit_normalizer(train: &TrajectoryDataset) -> Result<TimestepNormalizer, ResidualizeError> {
    TimestepNormalizer::fit(train.data())
}

/// `t - 1` per-transition affine predictors fitted by ridge regression on
/// normalized blocks. The bias is handled by centering and is unregularized.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeChain {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    lambda: f64,
}

fn fit_transition(
    x: ndarray::ArrayView2<'_, f64>,
    y: ndarray::ArrayView2<'_, f64>,
    lambda: f64,
    transition: usize,
) -> Result<(Array2<f64>, Array1<f64>), ResidualizeError> {
    let d = x.ncols();
    let x_mean = x.mean_axis(Axis(0)).unwrap();
    let y_mean = y.mean_axis(Axis(0)).unwrap();
    let xc = &x - &x_mean;
    let yc = &y - &y_mean;
    // Unnormalized covariances: the objective sums over samples.
    let mut s_xx = xc.t().dot(&xc);
    let s_xy = xc.t().dot(&yc);
    for k in 0..d {
        s_xx[(k, k)] += lambda;
    }
    let w_t = solve_spd(&s_xx, &s_xy).map_err(|e| match e {
        LinalgError::NotPositiveDefinite { .. } => ResidualizeError::Singular { transition },
        LinalgError::DimensionMismatch(m) => shape_err("square system", m),
    })?;
    let w = w_t.t().to_owned();
    let b = &y_mean - &w.dot(&x_mean);
    Ok((w, b))
}

impl RidgeChain {
    /// Closed-form fit: for each adjacent transition, `W = S_yx (S_xx + lambda I)^-1`
    /// on centered blocks, `b = y_mean - W x_mean`, solved by Cholesky.
    pub fn fit(normalized: &Array3<f64>, lambda: f64) -> Result<Self, ResidualizeError> {
        Self::fit_with_threads(normalized, lambda, 1)
    }

    /// As [`RidgeChain::fit`], sharding the independent per-transition fits
    /// across up to `threads` worker threads. Results are identical for any
    /// thread count: each transition is computed whole by one worker.
    pub fn fit_with_threads(
        normalized: &Array3<f64>,
        lambda: f64,
        threads: usize,
    ) -> Result<Self, ResidualizeError> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(ResidualizeError::BadLambda(lambda));
        }
        let (n, t, _) = normalized.dim();
        if n < 2 {
            return Err(ResidualizeError::NotEnoughSamples(n));
        }
        let n_transitions = t - 1;
        let workers = threads.max(1).min(n_transitions);
        type FitSlot = Option<Result<(Array2<f64>, Array1<f64>), ResidualizeError>>;
        let mut results: Vec<FitSlot> = (0..n_transitions).map(|_| None).collect();
        if workers <= 1 {
            for (idx, slot) in results.iter_mut().enumerate() {
                let x = normalized.index_axis(Axis(1), idx);
                let y = normalized.index_axis(Axis(1), idx + 1);
                *slot = Some(fit_transition(x, y, lambda, idx + 1));
            }
        } else {
            std::thread::scope(|scope| {
                for (tid, chunk) in results.chunks_mut(n_transitions.div_ceil(workers)).enumerate()
                {
                    let chunk_start = tid * n_transitions.div_ceil(workers);
                    let normalized = &normalized;
                    scope.spawn(move || {
                        for (off, slot) in chunk.iter_mut().enumerate() {
                            let idx = chunk_start + off;
                            let x = normalized.index_axis(Axis(1), idx);
                            let y = normalized.index_axis(Axis(1), idx + 1);
                            *slot = Some(fit_transition(x, y, lambda, idx + 1));
                        }
                    });
                }
            });
        }
        let mut weights = Vec::with_capacity(n_transitions);
        let mut biases = Vec::with_capacity(n_transitions);
        for slot in results {
            let (w, b) = slot.expect("all transitions computed")?;
            weights.push(w);
            biases.push(b);
        }
        Ok(RidgeChain {
            weights,
            biases,
            lambda,
        })
    }

    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>, lambda: f64) -> Self {
        assert_eq!(weights.len(), biases.len());
        RidgeChain {
            weights,
            biases,
            lambda,
        }
    }

    pub fn num_transitions(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.biases.first().map_or(0, |b| b.len())
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn weight(&self, transition: usize) -> &Array2<f64> {
        &self.weights[transition]
    }

    pub fn bias(&self, transition: usize) -> &Array1<f64> {
        &self.biases[transition]
    }

    /// Prediction of block `transition + 1` from block `transition`.
    ///
    /// This is the single prediction routine shared by residual construction,
    /// the EV diagnostic, and teacher-forced reconstruction, so recomposition
    /// reproduces inputs exactly.
    pub fn predict_block(&self, prev: &Array2<f64>, transition: usize) -> Array2<f64> {
        &prev.dot(&self.weights[transition].t()) + &self.biases[transition]
    }
}

pub fn fit_ridge(normalized: &Array3<f64>, lambda: f64) -> Result<RidgeChain, ResidualizeError> {
    RidgeChain::fit(normalized, lambda)
}

fn check_chain(normalized: &Array3<f64>, chain: &RidgeChain) -> Result<(), ResidualizeError> {
    let (_, t, d) = normalized.dim();
    if chain.num_transitions() != t - 1 || chain.dim() != d {
        return Err(shape_err(
            format!("chain with {} transitions of dim {}", t - 1, d),
            format!(
                "chain with {} transitions of dim {}",
                chain.num_transitions(),
                chain.dim()
            ),
        ));
    }
    Ok(())
}

/// Residual blocks `r_i = a_i - (W_i a_{i-1} + b_i)` for `i = 1..t-1`;
/// entry `i - 1` of the result corresponds to block `i`.
pub fn residualize(
    normalized: &Array3<f64>,
    chain: &RidgeChain,
) -> Result<Vec<Array2<f64>>, ResidualizeError> {
    check_chain(normalized, chain)?;
    let t = normalized.dim().1;
    let mut out = Vec::with_capacity(t - 1);
    for i in 1..t {
        let prev = normalized.index_axis(Axis(1), i - 1).to_owned();
        let cur = normalized.index_axis(Axis(1), i).to_owned();
        let pred = chain.predict_block(&prev, i - 1);
        out.push(&cur - &pred);
    }
    Ok(out)
}

/// Per-transition validation explained variance of the chain. A
/// zero-variance denominator yields NaN for that transition.
pub fn ridge_ev_diagnostic(
    normalized_val: &Array3<f64>,
    chain: &RidgeChain,
) -> Result<Vec<f64>, ResidualizeError> {
    check_chain(normalized_val, chain)?;
    let t = normalized_val.dim().1;
    let mut evs = Vec::with_capacity(t - 1);
    for i in 1..t {
        let prev = normalized_val.index_axis(Axis(1), i - 1).to_owned();
        let cur = normalized_val.index_axis(Axis(1), i).to_owned();
        let pred = chain.predict_block(&prev, i - 1);
        let mean = cur.mean_axis(Axis(0)).unwrap();
        let num: f64 = (&cur - &pred).iter().map(|v| v * v).sum();
        let den: f64 = cur
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .zip(mean.iter())
                    .map(|(v, m)| (v - m) * (v - m))
                    .sum::<f64>()
            })
            .sum();
        evs.push(if den > 0.0 { 1.0 - num / den } else { f64::NAN });
    }
    Ok(evs)
}

/// Which of the four model variants an SAE input belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaeInputSpec {
    pub residualized: bool,
    pub concatenated: bool,
}

impl SaeInputSpec {
    pub fn name(&self) -> &'static str {
        match (self.residualized, self.concatenated) {
            (true, true) => "resid_concat",
            (true, false) => "resid_noconcat",
            (false, true) => "noresid_concat",
            (false, false) => "noresid_noconcat",
        }
    }
}

/// Assembled, component-normalized SAE inputs.
#[derive(Debug, Clone)]
pub enum SaeInputs {
    /// One `[q, t * d]` matrix; a single trajectory-level sparse code.
    Concatenated(Array2<f64>),
    /// `t` separate `[q, d]` matrices, one SAE per block.
    PerBlock(Vec<Array2<f64>>),
}

impl SaeInputs {
    pub fn num_samples(&self) -> usize {
        match self {
            SaeInputs::Concatenated(x) => x.nrows(),
            SaeInputs::PerBlock(blocks) => blocks.first().map_or(0, |b| b.nrows()),
        }
    }
}

/// The raw z-components fed to the second normalization: block 0 is the
/// normalized anchor activation, later blocks are residuals (residualized
/// spec) or normalized activations (raw spec).
pub fn build_z_blocks(
    normalized: &Array3<f64>,
    chain: Option<&RidgeChain>,
    spec: SaeInputSpec,
) -> Result<Vec<Array2<f64>>, ResidualizeError> {
    let t = normalized.dim().1;
    if spec.residualized {
        let chain = chain.ok_or(ResidualizeError::ChainRequired)?;
        let residuals = residualize(normalized, chain)?;
        let mut blocks = Vec::with_capacity(t);
        blocks.push(normalized.index_axis(Axis(1), 0).to_owned());
        blocks.extend(residuals);
        Ok(blocks)
    } else {
        Ok((0..t)
            .map(|i| normalized.index_axis(Axis(1), i).to_owned())
            .collect())
    }
}

fn blocks_to_array3(blocks: &[Array2<f64>]) -> Array3<f64> {
    let t = blocks.len();
    let (q, d) = blocks[0].dim();
    let mut out = Array3::<f64>::zeros((q, t, d));
    for (i, b) in blocks.iter().enumerate() {
        out.index_axis_mut(Axis(1), i).assign(b);
    }
    out
}

fn assemble(
    blocks: &[Array2<f64>],
    comp: &TimestepNormalizer,
    concatenated: bool,
) -> Result<SaeInputs, ResidualizeError> {
    let t = blocks.len();
    let normalized: Vec<Array2<f64>> = blocks
        .iter()
        .enumerate()
        .map(|(i, b)| comp.apply_block(b, i))
        .collect::<Result<_, _>>()?;
    if concatenated {
        let (q, d) = normalized[0].dim();
        let mut out = Array2::<f64>::zeros((q, t * d));
        for (i, b) in normalized.iter().enumerate() {
            out.slice_mut(ndarray::s![.., i * d..(i + 1) * d]).assign(b);
        }
        Ok(SaeInputs::Concatenated(out))
    } else {
        Ok(SaeInputs::PerBlock(normalized))
    }
}

/// Fits the per-component normalizer on training data and returns the
/// normalized SAE inputs along with it.
pub fn build_sae_input_fit(
    normalized_train: &Array3<f64>,
    chain: Option<&RidgeChain>,
    spec: SaeInputSpec,
) -> Result<(SaeInputs, TimestepNormalizer), ResidualizeError> {
    let blocks = build_z_blocks(normalized_train, chain, spec)?;
    let comp = TimestepNormalizer::fit(&blocks_to_array3(&blocks))?;
    let inputs = assemble(&blocks, &comp, spec.concatenated)?;
    Ok((inputs, comp))
}

/// Applies a train-fitted component normalizer to new data.
pub fn build_sae_input(
    normalized: &Array3<f64>,
    chain: Option<&RidgeChain>,
    spec: SaeInputSpec,
    comp: &TimestepNormalizer,
) -> Result<SaeInputs, ResidualizeError> {
    let blocks = build_z_blocks(normalized, chain, spec)?;
    if comp.num_timesteps() != blocks.len() || comp.dim() != blocks[0].ncols() {
        return Err(shape_err(
            format!("components [{}, {}]", comp.num_timesteps(), comp.dim()),
            format!("components [{}, {}]", blocks.len(), blocks[0].ncols()),
        ));
    }
    assemble(&blocks, comp, spec.concatenated)
}

/// Splits a concatenated `[q, t * d]` matrix back into `t` blocks.
pub fn split_concat(x: &Array2<f64>, t: usize, d: usize) -> Result<Vec<Array2<f64>>, ResidualizeError> {
    if x.ncols() != t * d {
        return Err(shape_err(format!("[_, {}]", t * d), format!("[_, {}]", x.ncols())));
    }
    Ok((0..t)
        .map(|i| x.slice(ndarray::s![.., i * d..(i + 1) * d]).to_owned())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use ndarray::{Array1, Array2, Array3, Axis};

    fn spec(noise: f64, rank: usize) -> SyntheticSpec {
        SyntheticSpec {
            n: 256,
            t: 4,
            d: 6,
            dynamics_scale: 1.0,
            residual_rank: rank,
            residual_sparsity: 0.2,
            noise_std: noise,
            seed: 5,
            grid: None,
            stride: 10,
        }
    }

    #[test]
    fn normalizer_roundtrip_and_statistics() {
        let (ds, _) = generate_synthetic(&spec(0.3, 2)).unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        let back = norm.invert(&normalized).unwrap();
        let max_err = ds
            .data()
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-10, "roundtrip error {max_err}");

        let (n, t, d) = normalized.dim();
        for i in 0..t {
            let block = normalized.index_axis(Axis(1), i);
            for c in 0..d {
                let col: Vec<f64> = block.column(c).to_vec();
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                assert!(mean.abs() < 1e-9, "mean {mean} at ({i}, {c})");
                assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {} at ({i}, {c})", var.sqrt());
            }
        }
    }

    #[test]
    fn constant_coordinate_is_floored() {
        let mut data = Array3::<f64>::zeros((8, 2, 2));
        for q in 0..8 {
            data[(q, 0, 0)] = 3.25;
            data[(q, 0, 1)] = q as f64;
            data[(q, 1, 0)] = -1.0;
            data[(q, 1, 1)] = (q as f64) * 0.5;
        }
        let norm = TimestepNormalizer::fit(&data).unwrap();
        assert_eq!(norm.sigma()[(0, 0)], SIGMA_FLOOR);
        let normalized = norm.apply(&data).unwrap();
        for q in 0..8 {
            assert!(normalized[(q, 0, 0)].abs() < 1e-9);
        }
    }

    #[test]
    fn two_point_population_stats() {
        let mut data = Array3::<f64>::zeros((2, 2, 1));
        data[(0, 0, 0)] = -1.0;
        data[(1, 0, 0)] = 1.0;
        data[(0, 1, 0)] = -1.0;
        data[(1, 1, 0)] = 1.0;
        let norm = TimestepNormalizer::fit(&data).unwrap();
        assert_eq!(norm.mu()[(0, 0)], 0.0);
        assert_eq!(norm.sigma()[(0, 0)], 1.0);
    }

    #[test]
    fn normalizer_needs_two_samples() {
        let data = Array3::<f64>::zeros((1, 2, 2));
        assert!(matches!(
            TimestepNormalizer::fit(&data),
            Err(ResidualizeError::NotEnoughSamples(1))
        ));
    }

    #[test]
    fn identity_data_fits_identity_map() {
        // y = x exactly across the transition, lambda = 0
        let mut data = Array3::<f64>::zeros((64, 2, 3));
        for q in 0..64 {
            for c in 0..3 {
                let v = ((q * 3 + c) as f64).sin();
                data[(q, 0, c)] = v;
                data[(q, 1, c)] = v;
            }
        }
        let chain = RidgeChain::fit(&data, 0.0).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((chain.weight(0)[(r, c)] - expect).abs() < 1e-8);
            }
            assert!(chain.bias(0)[r].abs() < 1e-8);
        }
    }

    #[test]
    fn hand_computed_scalar_ridge() {
        // x in {1,2,3}, y = 2x + 1, lambda = 0.1:
        // centered normal equations give W = 4/2.1, b = 2.5/2.1
        let mut data = Array3::<f64>::zeros((3, 2, 1));
        for (q, x) in [1.0, 2.0, 3.0].iter().enumerate() {
            data[(q, 0, 0)] = *x;
            data[(q, 1, 0)] = 2.0 * x + 1.0;
        }
        let chain = RidgeChain::fit(&data, 0.1).unwrap();
        assert!((chain.weight(0)[(0, 0)] - 4.0 / 2.1).abs() < 1e-12);
        assert!((chain.bias(0)[0] - 2.5 / 2.1).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_at_lambda_zero_errors() {
        // duplicate coordinate makes S_xx singular
        let mut data = Array3::<f64>::zeros((16, 2, 2));
        for q in 0..16 {
            let v = q as f64;
            data[(q, 0, 0)] = v;
            data[(q, 0, 1)] = v;
            data[(q, 1, 0)] = v + 1.0;
            data[(q, 1, 1)] = v - 1.0;
        }
        match RidgeChain::fit(&data, 0.0) {
            Err(ResidualizeError::Singular { transition: 1 }) => {}
            other => panic!("expected Singular, got {other:?}"),
        }
        // and the advice holds: lambda > 0 fits fine
        assert!(RidgeChain::fit(&data, 0.1).is_ok());
    }

    #[test]
    fn noiseless_dynamics_recover_planted_affine_map() {
        // rank 0, no noise: ridge at lambda = 0 on the raw blocks recovers
        // the planted transition matrices and offsets
        let (ds, gt) = generate_synthetic(&SyntheticSpec {
            n: 512,
            ..spec(0.0, 0)
        })
        .unwrap();
        let chain = RidgeChain::fit(ds.data(), 0.0).unwrap();
        for i in 0..chain.num_transitions() {
            let w_err = (chain.weight(i) - &gt.transition_matrices[i])
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            let b_err = (chain.bias(i) - &gt.offsets[i])
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(w_err <= 1e-8, "W error {w_err} at transition {i}");
            assert!(b_err <= 1e-8, "b error {b_err} at transition {i}");
        }
    }

    #[test]
    fn noiseless_dynamics_leave_no_residual() {
        let (ds, _) = generate_synthetic(&spec(0.0, 0)).unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        let chain = RidgeChain::fit(&normalized, 0.0).unwrap();
        let residuals = residualize(&normalized, &chain).unwrap();
        for (i, r) in residuals.iter().enumerate() {
            let max = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 1e-7, "residual {max} at transition {i}");
        }
    }

    #[test]
    fn identity_chain_is_differencing() {
        let (ds, _) = generate_synthetic(&spec(0.4, 2)).unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        let d = ds.channels();
        let t = ds.num_timesteps();
        let chain = RidgeChain::from_parts(
            (1..t).map(|_| Array2::eye(d)).collect(),
            (1..t).map(|_| Array1::zeros(d)).collect(),
            0.0,
        );
        let residuals = residualize(&normalized, &chain).unwrap();
        for i in 1..t {
            let diff = &normalized.index_axis(Axis(1), i) - &normalized.index_axis(Axis(1), i - 1);
            let max = (&residuals[i - 1] - &diff)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 1e-12);
        }
    }

    #[test]
    fn deresidualization_identity_is_exact() {
        let (ds, _) = generate_synthetic(&spec(0.5, 3)).unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        let chain = RidgeChain::fit(&normalized, 0.1).unwrap();
        let residuals = residualize(&normalized, &chain).unwrap();
        for i in 1..ds.num_timesteps() {
            let prev = normalized.index_axis(Axis(1), i - 1).to_owned();
            let recomposed = &chain.predict_block(&prev, i - 1) + &residuals[i - 1];
            let max = (&recomposed - &normalized.index_axis(Axis(1), i))
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max <= 1e-12, "recomposition error {max} at block {i}");
        }
    }

    #[test]
    fn planted_directions_explain_residuals() {
        // low noise so the sparse planted component dominates the residual
        let (ds, gt) = generate_synthetic(&SyntheticSpec {
            n: 1024,
            noise_std: 0.02,
            residual_rank: 3,
            ..spec(0.0, 3)
        })
        .unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        let chain = RidgeChain::fit(&normalized, 0.0).unwrap();
        let residuals = residualize(&normalized, &chain).unwrap();
        for (idx, r_norm) in residuals.iter().enumerate() {
            // residual back in raw units
            let i = idx + 1;
            let r_raw = r_norm * &norm.sigma().row(i);
            // least-squares projection onto the planted directions
            let dirs = &gt.directions[idx]; // [rank, d]
            let basis = dirs.t().to_owned(); // [d, rank]
            let gram = basis.t().dot(&basis);
            let coef = solve_spd(&gram, &basis.t().dot(&r_raw.t().to_owned())).unwrap();
            let fitted = basis.dot(&coef); // [d, q]
            let mean = r_raw.mean_axis(Axis(0)).unwrap();
            let num: f64 = (&r_raw - &fitted.t())
                .iter()
                .map(|v| v * v)
                .sum();
            let den: f64 = r_raw
                .rows()
                .into_iter()
                .map(|row| {
                    row.iter()
                        .zip(mean.iter())
                        .map(|(v, m)| (v - m) * (v - m))
                        .sum::<f64>()
                })
                .sum();
            let ev = 1.0 - num / den;
            assert!(ev >= 0.9, "planted EV {ev} at transition {i}");
        }
    }

    #[test]
    fn shrinkage_is_monotone_in_lambda() {
        let (ds, _) = generate_synthetic(&spec(0.3, 2)).unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        let mut prev_norms: Option<Vec<f64>> = None;
        for lambda in [0.0, 0.01, 0.1, 1.0, 10.0, 100.0] {
            let chain = RidgeChain::fit(&normalized, lambda).unwrap();
            let norms: Vec<f64> = (0..chain.num_transitions())
                .map(|i| crate::linalg::frobenius_norm(chain.weight(i)))
                .collect();
            if let Some(prev) = &prev_norms {
                for (a, b) in prev.iter().zip(norms.iter()) {
                    assert!(*b <= a + 1e-12, "norm grew from {a} to {b} as lambda rose");
                }
            }
            prev_norms = Some(norms);
        }
    }

    #[test]
    fn ev_diagnostic_fixtures() {
        let (ds, _) = generate_synthetic(&spec(0.2, 2)).unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        // perfect predictor: fit on the same data at lambda = 0 with clean dynamics
        let (clean, _) = generate_synthetic(&spec(0.0, 0)).unwrap();
        let clean_norm = fit_normalizer(&clean).unwrap();
        let clean_normalized = clean_norm.apply(clean.data()).unwrap();
        let chain = RidgeChain::fit(&clean_normalized, 0.0).unwrap();
        for ev in ridge_ev_diagnostic(&clean_normalized, &chain).unwrap() {
            assert!((ev - 1.0).abs() < 1e-9, "perfect predictor EV {ev}");
        }

        // zero weights with the eval mean as bias: EV exactly 0
        let t = ds.num_timesteps();
        let d = ds.channels();
        let zero_chain = RidgeChain::from_parts(
            (1..t).map(|_| Array2::zeros((d, d))).collect(),
            (1..t)
                .map(|i| {
                    normalized
                        .index_axis(Axis(1), i)
                        .mean_axis(Axis(0))
                        .unwrap()
                })
                .collect(),
            0.0,
        );
        for ev in ridge_ev_diagnostic(&normalized, &zero_chain).unwrap() {
            assert!(ev.abs() < 1e-12, "mean predictor EV {ev}");
        }
    }

    #[test]
    fn ridge_ev_close_to_planted_fraction() {
        let gen = SyntheticSpec {
            n: 4096,
            t: 5,
            d: 16,
            dynamics_scale: 1.0,
            residual_rank: 4,
            residual_sparsity: 0.1,
            noise_std: 0.4,
            seed: 23,
            grid: None,
            stride: 10,
        };
        let (ds, gt) = generate_synthetic(&gen).unwrap();
        let (train, val) = crate::dataset::split(&ds, 0.2, 1).unwrap();
        let norm = fit_normalizer(&train).unwrap();
        let train_n = norm.apply(train.data()).unwrap();
        let val_n = norm.apply(val.data()).unwrap();
        let chain = RidgeChain::fit(&train_n, 0.1).unwrap();
        let ridge_ev = ridge_ev_diagnostic(&val_n, &chain).unwrap();
        let planted_ev = gt.planted_linear_ev(&val);
        for (r, p) in ridge_ev.iter().zip(planted_ev.iter()) {
            assert!(
                (r - p).abs() <= 0.05,
                "ridge EV {r} vs planted fraction {p}"
            );
        }
    }

    #[test]
    fn sae_input_dimensions() {
        let (ds, _) = generate_synthetic(&SyntheticSpec {
            n: 64,
            t: 5,
            d: 16,
            ..spec(0.2, 2)
        })
        .unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        let chain = RidgeChain::fit(&normalized, 0.1).unwrap();
        let (inputs, _) = build_sae_input_fit(
            &normalized,
            Some(&chain),
            SaeInputSpec {
                residualized: true,
                concatenated: true,
            },
        )
        .unwrap();
        match inputs {
            SaeInputs::Concatenated(x) => assert_eq!(x.ncols(), 80),
            _ => panic!("expected concatenated inputs"),
        }
    }

    #[test]
    fn full_scale_concatenation_width() {
        // T=5, d=1280 concatenates to 6400
        let data = Array3::from_shape_fn((4, 5, 1280), |(q, i, c)| {
            ((q + i + c) as f64 * 0.001).sin()
        });
        let norm = TimestepNormalizer::fit(&data).unwrap();
        let normalized = norm.apply(&data).unwrap();
        let (inputs, _) = build_sae_input_fit(
            &normalized,
            None,
            SaeInputSpec {
                residualized: false,
                concatenated: true,
            },
        )
        .unwrap();
        match inputs {
            SaeInputs::Concatenated(x) => assert_eq!(x.ncols(), 6400),
            _ => panic!("expected concatenated inputs"),
        }
    }

    #[test]
    fn raw_inputs_unnormalize_back_to_activations() {
        let (ds, _) = generate_synthetic(&spec(0.3, 2)).unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        let raw_spec = SaeInputSpec {
            residualized: false,
            concatenated: false,
        };
        let (inputs, comp) = build_sae_input_fit(&normalized, None, raw_spec).unwrap();
        let blocks = match inputs {
            SaeInputs::PerBlock(b) => b,
            _ => panic!("expected per-block inputs"),
        };
        for (i, b) in blocks.iter().enumerate() {
            let back = comp.invert_block(b, i).unwrap();
            let max = (&back - &normalized.index_axis(Axis(1), i))
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 1e-10, "unnorm roundtrip err {max} at block {i}");
        }
    }

    #[test]
    fn residualized_inputs_require_chain() {
        let (ds, _) = generate_synthetic(&spec(0.1, 1)).unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        assert!(matches!(
            build_z_blocks(
                &normalized,
                None,
                SaeInputSpec {
                    residualized: true,
                    concatenated: true
                }
            ),
            Err(ResidualizeError::ChainRequired)
        ));
    }

    #[test]
    fn component_normalizer_rejects_mismatched_shapes() {
        let (ds, _) = generate_synthetic(&spec(0.1, 1)).unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        let wrong = TimestepNormalizer::from_parts(Array2::zeros((2, 3)), Array2::ones((2, 3)));
        assert!(build_sae_input(
            &normalized,
            None,
            SaeInputSpec {
                residualized: false,
                concatenated: true
            },
            &wrong
        )
        .is_err());
    }

    #[test]
    fn default_lambda_matches_reference_configuration() {
        assert_eq!(DEFAULT_RIDGE_LAMBDA, 0.1);
    }

    #[test]
    fn threaded_fit_matches_sequential() {
        let (ds, _) = generate_synthetic(&SyntheticSpec {
            t: 5,
            ..spec(0.3, 2)
        })
        .unwrap();
        let norm = fit_normalizer(&ds).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        let sequential = RidgeChain::fit(&normalized, 0.1).unwrap();
        for threads in [2, 3, 8] {
            let parallel = RidgeChain::fit_with_threads(&normalized, 0.1, threads).unwrap();
            assert_eq!(sequential, parallel, "threads = {threads}");
        }
    }
}
