//! `tsae train`: build SAE inputs for the configured variant and train the
//! trajectory-level SAE (or one SAE per timestep block), checkpointing by
//! best validation EV.

use std::fs;

use serde::Serialize;
use tsae::evalmetrics::allocate_budget;
use tsae::residualize::{build_sae_input, SaeInputs};
use tsae::sae::{
    init_model, save_checkpoint, train, Checkpoint, CheckpointHeader, LossKind, SaeModel,
    Termination, TrainHistory, TrainOutcome,
};

use super::{load_dataset, load_ridge};
use crate::config::RunConfig;
use crate::errors::{CliError, CliResult};
use crate::manifest::{sha256_file_raw, Manifest};

#[derive(Serialize)]
struct HistoryFile {
    variant: String,
    matryoshka: bool,
    k_traj: usize,
    expansion: f64,
    histories: Vec<TrainHistory>,
}

pub fn run(config: &RunConfig, config_bytes: &[u8]) -> CliResult<()> {
    fs::create_dir_all(&config.out_dir)?;
    let mut manifest = Manifest::new("train", config.seed, config_bytes);
    let train_ds = load_dataset(&config.train_tsae(), &mut manifest)?;
    let val_ds = load_dataset(&config.val_tsae(), &mut manifest)?;
    let ridge_path = config.ridge_path();
    let artifact = load_ridge(&ridge_path, &mut manifest)?;
    let ridge_hash = sha256_file_raw(&ridge_path)?;

    let spec = config.sae.input_spec();
    let t = train_ds.num_timesteps();
    let d = train_ds.channels();
    if artifact.num_timesteps() != t || artifact.dim() != d {
        return Err(CliError::bad_artifact(
            &ridge_path,
            format!(
                "preprocessing covers [{}, {}], dataset is [{t}, {d}]",
                artifact.num_timesteps(),
                artifact.dim()
            ),
        ));
    }
    let comp_norm = artifact.component_normalizer(spec.residualized);
    let chain = spec.residualized.then_some(&artifact.chain);
    let train_n = artifact
        .act_norm
        .apply(train_ds.data())
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let val_n = artifact
        .act_norm
        .apply(val_ds.data())
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let train_inputs = build_sae_input(&train_n, chain, spec, comp_norm)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let val_inputs = build_sae_input(&val_n, chain, spec, comp_norm)
        .map_err(|e| CliError::Numerical(e.to_string()))?;

    let loss_kind = if config.sae.matryoshka {
        LossKind::Matryoshka
    } else {
        LossKind::BatchTopK
    };
    let mut histories = Vec::new();
    let mut models: Vec<SaeModel> = Vec::new();
    let mut diverged = false;

    match (train_inputs, val_inputs) {
        (SaeInputs::Concatenated(train_x), SaeInputs::Concatenated(val_x)) => {
            let d_in = train_x.ncols();
            let m = (d_in as f64 * config.sae.expansion).round() as usize;
            let mut model = init_model(d_in, m, config.sae.k_avg, config.train_seed())
                .map_err(|e| CliError::config(e.to_string()))?;
            if config.sae.matryoshka {
                model
                    .set_groups(t)
                    .map_err(|e| CliError::config(e.to_string()))?;
            }
            eprintln!(
                "training {} SAE: D={d_in}, m={m}, k_avg={}, {} epochs",
                spec.name(),
                config.sae.k_avg,
                config.train.epochs
            );
            let out = run_one(model, &train_x, &val_x, config, loss_kind)?;
            diverged |= matches!(out.history.termination, Termination::Diverged { .. });
            histories.push(out.history);
            models.push(out.model);
        }
        (SaeInputs::PerBlock(train_blocks), SaeInputs::PerBlock(val_blocks)) => {
            let budgets = allocate_budget(config.eval.protocol, config.sae.k_avg, t)
                .map_err(|e| CliError::config(e.to_string()))?;
            let m = (d as f64 * config.sae.expansion).round() as usize;
            for (i, (train_x, val_x)) in train_blocks.iter().zip(val_blocks.iter()).enumerate() {
                eprintln!(
                    "training {} SAE for block {i}: D={d}, m={m}, k={}, {} epochs",
                    spec.name(),
                    budgets[i],
                    config.train.epochs
                );
                let model = init_model(d, m, budgets[i], config.train_seed().wrapping_add(i as u64))
                    .map_err(|e| CliError::config(e.to_string()))?;
                let out = run_one(model, train_x, val_x, config, loss_kind)?;
                diverged |= matches!(out.history.termination, Termination::Diverged { .. });
                histories.push(out.history);
                models.push(out.model);
            }
        }
        _ => unreachable!("input layout matches the concatenation flag"),
    }

    let ckpt = Checkpoint {
        header: CheckpointHeader {
            residualized: spec.residualized,
            concatenated: spec.concatenated,
            matryoshka: config.sae.matryoshka,
            t,
            d_block: d,
            k_traj: config.sae.k_avg,
            ridge_hash,
        },
        models,
    };
    ckpt.validate()
        .map_err(|e| CliError::Other(e.to_string()))?;
    let ckpt_path = config.checkpoint_path();
    save_checkpoint(&ckpt, &ckpt_path).map_err(|e| CliError::Other(e.to_string()))?;

    let history_file = HistoryFile {
        variant: variant_name(config),
        matryoshka: config.sae.matryoshka,
        k_traj: config.sae.k_avg,
        expansion: config.sae.expansion,
        histories,
    };
    let history_path = config.history_path();
    fs::write(
        &history_path,
        serde_json::to_vec_pretty(&history_file).map_err(|e| CliError::Other(e.to_string()))?,
    )?;
    eprintln!("wrote {} and {}", ckpt_path.display(), history_path.display());

    manifest.record_output(&ckpt_path)?;
    manifest.record_output(&history_path)?;
    manifest.write(&config.out_dir)?;

    if diverged {
        return Err(CliError::Numerical(
            "training diverged; the checkpoint holds the last good parameters".into(),
        ));
    }
    Ok(())
}

fn run_one(
    model: SaeModel,
    train_x: &ndarray::Array2<f64>,
    val_x: &ndarray::Array2<f64>,
    config: &RunConfig,
    loss_kind: LossKind,
) -> CliResult<TrainOutcome> {
    let train_config = config.train.to_config(config.train_seed());
    train(model, train_x, val_x, &train_config, loss_kind)
        .map_err(|e| CliError::Numerical(e.to_string()))
}

pub fn variant_name(config: &RunConfig) -> String {
    if config.sae.matryoshka {
        "matryoshka".to_string()
    } else {
        config.sae.input_spec().name().to_string()
    }
}
