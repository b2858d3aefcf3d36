//! `tsae steer`: build steering plans from a checkpoint (single latent or
//! source-to-target feature transfer) and optionally apply them to a stored
//! trajectory set.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use ndarray::Array2;
use tsae::analysis::{decoder_to_activation_space, encode_trajectories, DecoderTrajectory};
use tsae::evalmetrics::SaeSet;
use tsae::steering::{
    masked_contrast_select, save_plan, single_feature_plan, steer_dataset, transfer_direction,
    MaskSpec, SteeringPlan,
};

use super::{load_checkpoint_chained, load_dataset, load_ridge};
use crate::commands::eval::bundle_from_artifacts;
use crate::config::{RunConfig, SteerMode};
use crate::errors::{CliError, CliResult};
use crate::manifest::Manifest;

pub fn run(config: &RunConfig, config_bytes: &[u8]) -> CliResult<()> {
    fs::create_dir_all(&config.out_dir)?;
    let mut manifest = Manifest::new("steer", config.seed, config_bytes);
    let ridge_path = config.ridge_path();
    let artifact = load_ridge(&ridge_path, &mut manifest)?;
    let ckpt = load_checkpoint_chained(&config.checkpoint_path(), &ridge_path, &mut manifest)?;
    if !ckpt.header.concatenated {
        return Err(CliError::config(
            "steering needs a concatenated (trajectory-level) checkpoint",
        ));
    }
    let bundle = bundle_from_artifacts(config, &artifact, &ckpt)?;
    let model = match &bundle.saes {
        SaeSet::Single(m) => m.clone(),
        SaeSet::PerBlock(_) => unreachable!("checked concatenated above"),
    };
    let chain = ckpt.header.residualized.then_some(&artifact.chain);
    let comp_norm = artifact.component_normalizer(ckpt.header.residualized);

    // the dataset being steered supplies the full-step schedule
    let apply_ds = if config.steer.apply_to.as_os_str().is_empty() {
        None
    } else {
        Some(load_dataset(&config.steer.apply_to, &mut manifest)?)
    };

    let cfg = &config.steer;
    let (per_block, mask, full_steps, tag): (Array2<f64>, MaskSpec, Vec<u32>, String) =
        match cfg.mode {
            SteerMode::SingleFeature => {
                let traj = decoder_to_activation_space(
                    &model,
                    comp_norm,
                    &artifact.act_norm,
                    chain,
                    cfg.latent,
                )
                .map_err(|e| CliError::config(e.to_string()))?;
                let mask = if cfg.mask_tokens.is_empty() {
                    MaskSpec::Global
                } else {
                    MaskSpec::Uniform(cfg.mask_tokens.clone())
                };
                let steps = full_steps_for(config, apply_ds.as_ref(), traj.num_timesteps())?;
                (traj.phi, mask, steps, format!("latent{}", cfg.latent))
            }
            SteerMode::Transfer => {
                let src_ds = load_dataset(&cfg.source_trajectories, &mut manifest)?;
                let tgt_ds = load_dataset(&cfg.target_trajectories, &mut manifest)?;
                let src_codes = image_codes(&bundle, &src_ds, cfg.source_image, config)?;
                let tgt_codes = image_codes(&bundle, &tgt_ds, cfg.target_image, config)?;
                let src_mask = default_full_mask(&cfg.source_mask, src_codes.nrows());
                let tgt_mask = default_full_mask(&cfg.target_mask, tgt_codes.nrows());
                let selection = masked_contrast_select(
                    &src_codes,
                    &tgt_codes,
                    &src_mask,
                    &tgt_mask,
                    cfg.top_p,
                    cfg.lambda_src,
                    cfg.lambda_tgt,
                )
                .map_err(|e| CliError::Numerical(e.to_string()))?;
                eprintln!(
                    "selected {} features by masked contrast (top scores: {:?})",
                    selection.selected.len(),
                    &selection.selected[..selection.selected.len().min(8)]
                );

                // per-prompt trajectories: decoder directions scaled by the
                // masked mean activation on each side
                let mut src_trajs: BTreeMap<usize, DecoderTrajectory> = BTreeMap::new();
                let mut tgt_trajs: BTreeMap<usize, DecoderTrajectory> = BTreeMap::new();
                for k in &selection.selected {
                    let base = decoder_to_activation_space(
                        &model,
                        comp_norm,
                        &artifact.act_norm,
                        chain,
                        *k,
                    )
                    .map_err(|e| CliError::config(e.to_string()))?;
                    let c_src = masked_mean(&src_codes, &src_mask, *k);
                    let c_tgt = masked_mean(&tgt_codes, &tgt_mask, *k);
                    src_trajs.insert(
                        *k,
                        DecoderTrajectory {
                            phi: &base.phi * c_src,
                        },
                    );
                    tgt_trajs.insert(
                        *k,
                        DecoderTrajectory {
                            phi: &base.phi * c_tgt,
                        },
                    );
                }
                let v = transfer_direction(&selection, &src_trajs, &tgt_trajs)
                    .map_err(|e| CliError::Numerical(e.to_string()))?;
                let mask = if cfg.source_mask.is_empty() {
                    MaskSpec::Global
                } else {
                    MaskSpec::Uniform(cfg.source_mask.clone())
                };
                let steps = full_steps_for(config, apply_ds.as_ref(), v.nrows())?;
                (v, mask, steps, "transfer".to_string())
            }
        };

    let mut outputs: Vec<PathBuf> = Vec::new();
    for alpha in &cfg.alphas {
        let plan = build_plan(&per_block, &mask, *alpha, &full_steps, cfg.total_steps)?;
        let plan_path = config
            .out_dir
            .join(format!("plan_{tag}_alpha{alpha}.plan"));
        save_plan(&plan, &plan_path).map_err(|e| CliError::Other(e.to_string()))?;
        outputs.push(plan_path);
        if let Some(ds) = &apply_ds {
            let steered =
                steer_dataset(ds, &plan).map_err(|e| CliError::Numerical(e.to_string()))?;
            let out_path = config
                .out_dir
                .join(format!("steered_{tag}_alpha{alpha}.tsae"));
            tsae::dataset::save_trajectories(&steered, &out_path)
                .map_err(|e| CliError::Other(e.to_string()))?;
            outputs.push(out_path);
        }
    }
    for p in &outputs {
        manifest.record_output(p)?;
        eprintln!("wrote {}", p.display());
    }
    manifest.write(&config.out_dir)?;
    Ok(())
}

fn build_plan(
    per_block: &Array2<f64>,
    mask: &MaskSpec,
    alpha: f64,
    full_steps: &[u32],
    total_steps: usize,
) -> CliResult<SteeringPlan> {
    single_feature_plan(
        &DecoderTrajectory {
            phi: per_block.clone(),
        },
        mask.clone(),
        alpha,
        full_steps,
        total_steps,
    )
    .map_err(|e| CliError::config(e.to_string()))
}

/// The subsampled full-step schedule: from the dataset being steered when
/// one is given, otherwise a stride-10 default matching the generator.
fn full_steps_for(
    config: &RunConfig,
    apply_ds: Option<&tsae::dataset::TrajectoryDataset>,
    t: usize,
) -> CliResult<Vec<u32>> {
    if let Some(ds) = apply_ds {
        if ds.num_timesteps() != t {
            return Err(CliError::config(format!(
                "steering target has {} timestep blocks, model covers {t}",
                ds.num_timesteps()
            )));
        }
        return Ok(ds.meta().full_step_indices.clone());
    }
    let stride = config
        .dataset
        .synthetic
        .as_ref()
        .map_or(10, |s| s.stride);
    Ok((0..t as u32).map(|i| i * stride).collect())
}

/// Codes of every spatial token of one image, `[tokens, m]`.
fn image_codes(
    bundle: &tsae::evalmetrics::ModelBundle,
    ds: &tsae::dataset::TrajectoryDataset,
    image: usize,
    config: &RunConfig,
) -> CliResult<Array2<f64>> {
    if image >= ds.num_units() {
        return Err(CliError::config(format!(
            "image {image} out of range ({} available)",
            ds.num_units()
        )));
    }
    let encoded = encode_trajectories(bundle, ds, config.analysis.encode_batch_size)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let tokens = ds.grid().map_or(1, |g| g.tokens());
    let m = encoded.num_latents();
    let mut out = Array2::<f64>::zeros((tokens, m));
    for (row, loc) in encoded.locations.iter().enumerate() {
        if loc.image as usize == image && loc.chunk.is_none() {
            out.row_mut(loc.token as usize)
                .assign(&encoded.codes.row(row));
        }
    }
    Ok(out)
}

fn default_full_mask(mask: &[u32], tokens: usize) -> Vec<u32> {
    if mask.is_empty() {
        (0..tokens as u32).collect()
    } else {
        mask.to_vec()
    }
}

fn masked_mean(codes: &Array2<f64>, mask: &[u32], k: usize) -> f64 {
    mask.iter()
        .map(|t| codes[(*t as usize, k)])
        .sum::<f64>()
        / mask.len() as f64
}
