//! Teacher-forced activation-space reconstruction, the MSE/EV metric suite,
//! and the two sparsity-budget-matching protocols for variant comparison.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TrajectoryDataset;
use crate::residualize::{
    build_sae_input, ResidualizeError, RidgeChain, SaeInputSpec, SaeInputs, TimestepNormalizer,
};
use crate::sae::{SaeError, SaeModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("budget infeasible: {0}")]
    BudgetInfeasible(String),
    #[error("bundle is inconsistent: {0}")]
    BadBundle(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error(transparent)]
    Residualize(#[from] ResidualizeError),
    #[error(transparent)]
    Sae(#[from] SaeError),
}

/// How the trajectory-level sparse-code budget is matched across variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetProtocol {
    /// Timestep-wise models split one trajectory budget of `k_avg` across
    /// the `t` blocks; concatenated models use `k_avg` directly.
    TrajectoryMatched,
    /// Every timestep-wise SAE gets the full `k_avg`, giving an effective
    /// trajectory budget of about `t * k_avg` (reconstruction-favorable).
    PerTimestepMatched,
}

impl BudgetProtocol {
    pub fn name(&self) -> &'static str {
        match self {
            BudgetProtocol::TrajectoryMatched => "trajectory_matched",
            BudgetProtocol::PerTimestepMatched => "per_timestep_matched",
        }
    }
}

/// Per-block sparsity budgets for a timestep-wise model. Even split with the
/// remainder on the earliest blocks under trajectory matching.
pub fn allocate_budget(
    protocol: BudgetProtocol,
    k_avg: usize,
    t: usize,
) -> Result<Vec<usize>, EvalError> {
    if k_avg == 0 || t == 0 {
        return Err(EvalError::BudgetInfeasible(format!(
            "k_avg={k_avg}, t={t} must be positive"
        )));
    }
    match protocol {
        BudgetProtocol::TrajectoryMatched => {
            let base = k_avg / t;
            if base == 0 {
                return Err(EvalError::BudgetInfeasible(format!(
                    "k_avg={k_avg} cannot cover {t} blocks without a zero budget"
                )));
            }
            let rem = k_avg % t;
            Ok((0..t).map(|i| base + usize::from(i < rem)).collect())
        }
        BudgetProtocol::PerTimestepMatched => Ok(vec![k_avg; t]),
    }
}

/// The trained SAE(s) of one variant.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum SaeSet {
    Single(SaeModel),
    PerBlock(Vec<SaeModel>),
}

/// Everything needed to run teacher-forced reconstruction for one variant:
/// the SAE(s) plus the preprocessing state they were trained against.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spec: SaeInputSpec,
    pub act_norm: TimestepNormalizer,
    pub chain: Option<RidgeChain>,
    pub comp_norm: TimestepNormalizer,
    pub saes: SaeSet,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<(), EvalError> {
        let t = self.act_norm.num_timesteps();
        let d = self.act_norm.dim();
        if self.spec.residualized && self.chain.is_none() {
            return Err(EvalError::BadBundle(
                "residualized bundle is missing its ridge chain".into(),
            ));
        }
        if let Some(chain) = &self.chain {
            if chain.num_transitions() != t - 1 || chain.dim() != d {
                return Err(EvalError::BadBundle(format!(
                    "chain covers {} transitions of dim {}, dataset has {} of dim {}",
                    chain.num_transitions(),
                    chain.dim(),
                    t - 1,
                    d
                )));
            }
        }
        match (&self.saes, self.spec.concatenated) {
            (SaeSet::Single(m), true) => {
                if m.input_dim() != t * d {
                    return Err(EvalError::ShapeMismatch {
                        expected: format!("SAE input dim {}", t * d),
                        got: format!("{}", m.input_dim()),
                    });
                }
            }
            (SaeSet::PerBlock(ms), false) => {
                if ms.len() != t || ms.iter().any(|m| m.input_dim() != d) {
                    return Err(EvalError::BadBundle(format!(
                        "expected {t} per-block SAEs of input dim {d}"
                    )));
                }
            }
            _ => {
                return Err(EvalError::BadBundle(
                    "SAE set does not match the concatenation flag".into(),
                ))
            }
        }
        Ok(())
    }

    /// Total trajectory-level sparse-code budget of this bundle.
    pub fn trajectory_budget(&self) -> usize {
        match &self.saes {
            SaeSet::Single(m) => m.k_avg(),
            SaeSet::PerBlock(ms) => ms.iter().map(|m| m.k_avg()).sum(),
        }
    }
}

fn encode_decode_batched(
    model: &SaeModel,
    x: &Array2<f64>,
    batch_size: usize,
) -> Result<Array2<f64>, SaeError> {
    let n = x.nrows();
    let mut out = Array2::<f64>::zeros(x.raw_dim());
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let xb = x.slice(ndarray::s![start..end, ..]).to_owned();
        let (_, rec) = model.forward(&xb)?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&rec);
        start = end;
    }
    Ok(out)
}

/// Teacher-forced reconstruction of `ds` in original activation units.
///
/// Residualized bundles decode block 0 directly and rebuild later blocks as
/// `ridge prediction from the ground-truth previous block + decoded
/// residual`; raw bundles unnormalize decoded blocks directly. BatchTopK is
/// applied per evaluation batch of `eval_batch_size` rows in dataset order.
pub fn teacher_forced_reconstruct(
    bundle: &ModelBundle,
    ds: &TrajectoryDataset,
    eval_batch_size: usize,
) -> Result<Array3<f64>, EvalError> {
    bundle.validate()?;
    let (n, t, d) = ds.data().dim();
    if (t, d) != (bundle.act_norm.num_timesteps(), bundle.act_norm.dim()) {
        return Err(EvalError::ShapeMismatch {
            expected: format!(
                "[_, {}, {}]",
                bundle.act_norm.num_timesteps(),
                bundle.act_norm.dim()
            ),
            got: format!("[_, {t}, {d}]"),
        });
    }
    let normalized = bundle.act_norm.apply(ds.data())?;
    let inputs = build_sae_input(
        &normalized,
        bundle.chain.as_ref(),
        bundle.spec,
        &bundle.comp_norm,
    )?;

    // decode each component back into z-space (block 0 anchor + residuals, or
    // raw normalized blocks)
    let z_rec: Vec<Array2<f64>> = match (&bundle.saes, inputs) {
        (SaeSet::Single(model), SaeInputs::Concatenated(x)) => {
            let rec = encode_decode_batched(model, &x, eval_batch_size)?;
            crate::residualize::split_concat(&rec, t, d)?
                .into_iter()
                .enumerate()
                .map(|(i, b)| bundle.comp_norm.invert_block(&b, i))
                .collect::<Result<_, _>>()?
        }
        (SaeSet::PerBlock(models), SaeInputs::PerBlock(blocks)) => models
            .iter()
            .zip(blocks.iter())
            .enumerate()
            .map(|(i, (model, x))| {
                let rec = encode_decode_batched(model, x, eval_batch_size)?;
                bundle
                    .comp_norm
                    .invert_block(&rec, i)
                    .map_err(EvalError::from)
            })
            .collect::<Result<_, _>>()?,
        _ => unreachable!("bundle validation fixes the input layout"),
    };

    // reassemble in normalized activation space
    let mut rec_normalized = Array3::<f64>::zeros((n, t, d));
    if bundle.spec.residualized {
        let chain = bundle.chain.as_ref().expect("validated");
        rec_normalized.index_axis_mut(Axis(1), 0).assign(&z_rec[0]);
        for (i, z) in z_rec.iter().enumerate().skip(1) {
            let prev_truth = normalized.index_axis(Axis(1), i - 1).to_owned();
            let pred = chain.predict_block(&prev_truth, i - 1);
            rec_normalized
                .index_axis_mut(Axis(1), i)
                .assign(&(&pred + z));
        }
    } else {
        for (i, z) in z_rec.iter().enumerate() {
            rec_normalized.index_axis_mut(Axis(1), i).assign(z);
        }
    }
    Ok(bundle.act_norm.invert(&rec_normalized)?)
}

/// Reconstruction metrics in original activation units. Means are computed
/// on the evaluation set itself; zero-variance denominators yield NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub ev: f64,
    pub ev_per_timestep: Vec<f64>,
}

pub fn compute_metrics(a: &Array3<f64>, a_rec: &Array3<f64>) -> Result<Metrics, EvalError> {
    if a.dim() != a_rec.dim() {
        return Err(EvalError::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", a_rec.dim()),
        });
    }
    let (n, t, d) = a.dim();
    let count = (n * t * d) as f64;

    // global mean over (trajectory, timestep); per-timestep means per block
    let mut mu = vec![0.0f64; d];
    for q in 0..n {
        for i in 0..t {
            for c in 0..d {
                mu[c] += a[(q, i, c)];
            }
        }
    }
    for v in mu.iter_mut() {
        *v /= (n * t) as f64;
    }

    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for q in 0..n {
        for i in 0..t {
            for c in 0..d {
                let e = a[(q, i, c)] - a_rec[(q, i, c)];
                num += e * e;
                let m = a[(q, i, c)] - mu[c];
                den += m * m;
            }
        }
    }
    let mse = num / count;
    let ev = if den > 0.0 { 1.0 - num / den } else { f64::NAN };

    let mut ev_per_timestep = Vec::with_capacity(t);
    for i in 0..t {
        let block = a.index_axis(Axis(1), i);
        let mu_i = block.mean_axis(Axis(0)).unwrap();
        let mut num_i = 0.0f64;
        let mut den_i = 0.0f64;
        for q in 0..n {
            for c in 0..d {
                let e = a[(q, i, c)] - a_rec[(q, i, c)];
                num_i += e * e;
                let m = a[(q, i, c)] - mu_i[c];
                den_i += m * m;
            }
        }
        ev_per_timestep.push(if den_i > 0.0 {
            1.0 - num_i / den_i
        } else {
            f64::NAN
        });
    }
    Ok(Metrics {
        mse,
        ev,
        ev_per_timestep,
    })
}

/// One evaluation row: metrics plus the variant/protocol identification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub protocol: String,
    /// Trajectory-level sparse-code budget actually used.
    pub k_budget: f64,
    pub mse: f64,
    pub ev: f64,
    pub ev_per_timestep: Vec<f64>,
}

impl EvalReport {
    pub fn new(bundle: &ModelBundle, protocol: BudgetProtocol, metrics: Metrics) -> Self {
        EvalReport {
            variant: bundle.spec.name().to_string(),
            protocol: protocol.name().to_string(),
            k_budget: bundle.trajectory_budget() as f64,
            mse: metrics.mse,
            ev: metrics.ev,
            ev_per_timestep: metrics.ev_per_timestep,
        }
    }
}
