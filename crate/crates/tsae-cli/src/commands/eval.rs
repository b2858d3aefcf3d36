//! `tsae eval`: teacher-forced reconstruction of the validation split under
//! the configured budget protocol, reported as CSV and JSON in original
//! activation units.

use std::fs;

use tsae::evalmetrics::{
    allocate_budget, compute_metrics, teacher_forced_reconstruct, EvalReport, ModelBundle, SaeSet,
};

use super::{fmt_float, load_checkpoint_chained, load_dataset, load_ridge};
use crate::config::RunConfig;
use crate::errors::{CliError, CliResult};
use crate::manifest::Manifest;

/// Rebuilds the evaluation bundle from a checkpoint plus its preprocessing
/// artifact, applying the budget protocol to the per-model sparsity.
pub fn bundle_from_artifacts(
    config: &RunConfig,
    artifact: &tsae::residualize::PreprocessArtifact,
    ckpt: &tsae::sae::Checkpoint,
) -> CliResult<ModelBundle> {
    let header = &ckpt.header;
    let spec = tsae::residualize::SaeInputSpec {
        residualized: header.residualized,
        concatenated: header.concatenated,
    };
    let saes = if header.concatenated {
        let mut model = ckpt.models[0].clone();
        model
            .set_k_avg(config.sae.k_avg)
            .map_err(|e| CliError::config(e.to_string()))?;
        SaeSet::Single(model)
    } else {
        let budgets = allocate_budget(config.eval.protocol, config.sae.k_avg, header.t)
            .map_err(|e| CliError::config(e.to_string()))?;
        let mut models = Vec::with_capacity(ckpt.models.len());
        for (model, k) in ckpt.models.iter().zip(budgets) {
            let mut m = model.clone();
            m.set_k_avg(k).map_err(|e| CliError::config(e.to_string()))?;
            models.push(m);
        }
        SaeSet::PerBlock(models)
    };
    let bundle = ModelBundle {
        spec,
        act_norm: artifact.act_norm.clone(),
        chain: header.residualized.then(|| artifact.chain.clone()),
        comp_norm: artifact.component_normalizer(header.residualized).clone(),
        saes,
    };
    bundle
        .validate()
        .map_err(|e| CliError::Other(e.to_string()))?;
    Ok(bundle)
}

pub fn run(config: &RunConfig, config_bytes: &[u8]) -> CliResult<()> {
    fs::create_dir_all(&config.out_dir)?;
    let mut manifest = Manifest::new("eval", config.seed, config_bytes);
    let val_ds = load_dataset(&config.val_tsae(), &mut manifest)?;
    let ridge_path = config.ridge_path();
    let artifact = load_ridge(&ridge_path, &mut manifest)?;
    let ckpt = load_checkpoint_chained(&config.checkpoint_path(), &ridge_path, &mut manifest)?;
    let bundle = bundle_from_artifacts(config, &artifact, &ckpt)?;

    eprintln!(
        "evaluating {} under {} (trajectory budget {})",
        bundle.spec.name(),
        config.eval.protocol.name(),
        bundle.trajectory_budget()
    );
    let rec = teacher_forced_reconstruct(&bundle, &val_ds, config.eval.batch_size)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let metrics =
        compute_metrics(val_ds.data(), &rec).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut report = EvalReport::new(&bundle, config.eval.protocol, metrics);
    if ckpt.header.matryoshka {
        report.variant = "matryoshka".to_string();
    }
    eprintln!("overall EV {:.6}, MSE {:.6}", report.ev, report.mse);

    // long-format CSV: one row per (variant, protocol, k, expansion, scope, metric)
    let mut csv = String::from("variant,protocol,k_avg,expansion,scope,metric,value\n");
    let prefix = format!(
        "{},{},{},{}",
        report.variant, report.protocol, config.sae.k_avg, config.sae.expansion
    );
    csv.push_str(&format!("{prefix},overall,mse,{}\n", fmt_float(report.mse)));
    csv.push_str(&format!("{prefix},overall,ev,{}\n", fmt_float(report.ev)));
    csv.push_str(&format!(
        "{prefix},overall,k_budget,{}\n",
        fmt_float(report.k_budget)
    ));
    for (i, ev) in report.ev_per_timestep.iter().enumerate() {
        csv.push_str(&format!("{prefix},timestep_{i},ev,{}\n", fmt_float(*ev)));
    }
    let csv_path = config.metrics_csv();
    fs::write(&csv_path, csv)?;

    let json_path = config.metrics_json();
    fs::write(
        &json_path,
        serde_json::to_vec_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?,
    )?;
    eprintln!("wrote {} and {}", csv_path.display(), json_path.display());

    manifest.record_output(&csv_path)?;
    manifest.record_output(&json_path)?;
    manifest.write(&config.out_dir)?;
    Ok(())
}
