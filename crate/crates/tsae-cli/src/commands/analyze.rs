//! `tsae analyze`: per-latent decoder trajectories, temporal profiles,
//! self-similarity, top-activating samples, and (for grid datasets) spatial
//! cosine maps with positive entropy. Emits per-latent JSON, a group-level
//! CSV, and optional PGM map dumps.

use std::fs;

use serde::Serialize;
use tsae::analysis::{
    cosine_matrix, decoder_to_activation_space, encode_trajectories, positive_spatial_entropy,
    self_similarity, spatial_cosine_map, temporal_profile, top_activating_samples,
    write_pgm, RankedActivation, TemporalGroup,
};
use tsae::evalmetrics::SaeSet;

use super::{fmt_float, load_checkpoint_chained, load_dataset, load_ridge};
use crate::commands::eval::bundle_from_artifacts;
use crate::config::RunConfig;
use crate::errors::{CliError, CliResult};
use crate::manifest::Manifest;

#[derive(Serialize, Clone)]
struct LatentRecord {
    latent: usize,
    decoder_norms: Vec<f64>,
    temporal_profile: Option<Vec<f64>>,
    group: Option<TemporalGroup>,
    self_similarity: f64,
    cosine_matrix: Vec<Vec<f64>>,
    /// Mean positive spatial entropy over timesteps on the map image, when
    /// grid metadata exists.
    mean_positive_entropy: Option<f64>,
    top_samples: Vec<RankedActivation>,
}

pub fn run(config: &RunConfig, config_bytes: &[u8]) -> CliResult<()> {
    fs::create_dir_all(&config.out_dir)?;
    let mut manifest = Manifest::new("analyze", config.seed, config_bytes);
    let val_ds = load_dataset(&config.val_tsae(), &mut manifest)?;
    let ridge_path = config.ridge_path();
    let artifact = load_ridge(&ridge_path, &mut manifest)?;
    let ckpt = load_checkpoint_chained(&config.checkpoint_path(), &ridge_path, &mut manifest)?;
    if !ckpt.header.concatenated {
        return Err(CliError::config(
            "analysis needs a concatenated (trajectory-level) checkpoint",
        ));
    }
    let bundle = bundle_from_artifacts(config, &artifact, &ckpt)?;
    let model = match &bundle.saes {
        SaeSet::Single(m) => m.clone(),
        SaeSet::PerBlock(_) => unreachable!("checked concatenated above"),
    };
    let chain = ckpt.header.residualized.then_some(&artifact.chain);
    let comp_norm = artifact.component_normalizer(ckpt.header.residualized);

    eprintln!("encoding validation set ({} trajectories)", val_ds.num_trajectories());
    let encoded = encode_trajectories(&bundle, &val_ds, config.analysis.encode_batch_size)
        .map_err(|e| CliError::Numerical(e.to_string()))?;

    let latents: Vec<usize> = if config.analysis.latents.is_empty() {
        (0..model.num_latents()).collect()
    } else {
        config.analysis.latents.clone()
    };
    for k in &latents {
        if *k >= model.num_latents() {
            return Err(CliError::config(format!(
                "analysis.latents entry {k} out of range (m = {})",
                model.num_latents()
            )));
        }
    }

    eprintln!(
        "analyzing {} latents with {} threads",
        latents.len(),
        config.threads
    );
    let records = analyze_latents(config, &latents, &model, comp_norm, &artifact, chain, &val_ds, &encoded)?;

    // PGM dumps for selected latents
    let mut map_paths = Vec::new();
    if !config.analysis.map_latents.is_empty() {
        if val_ds.grid().is_none() {
            return Err(CliError::config(
                "analysis.map_latents needs grid metadata in the dataset",
            ));
        }
        let maps_dir = config.maps_dir();
        fs::create_dir_all(&maps_dir)?;
        for k in &config.analysis.map_latents {
            let traj =
                decoder_to_activation_space(&model, comp_norm, &artifact.act_norm, chain, *k)
                    .map_err(|e| CliError::config(e.to_string()))?;
            for i in 0..val_ds.num_timesteps() {
                let map = spatial_cosine_map(&traj, &val_ds, config.analysis.map_image, i)
                    .map_err(|e| CliError::config(e.to_string()))?;
                let path = maps_dir.join(format!("latent{k}_t{i}.pgm"));
                write_pgm(&map, &path).map_err(|e| CliError::Other(e.to_string()))?;
                map_paths.push(path);
            }
        }
    }

    // group-level summary
    let mut csv = String::from("group,count,mean_self_similarity,mean_positive_entropy\n");
    for group in [TemporalGroup::Early, TemporalGroup::Middle, TemporalGroup::Late] {
        let members: Vec<&LatentRecord> = records
            .iter()
            .filter(|r| r.group == Some(group))
            .collect();
        let mean = |f: &dyn Fn(&LatentRecord) -> Option<f64>| -> f64 {
            let vals: Vec<f64> = members.iter().filter_map(|r| f(r)).collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        csv.push_str(&format!(
            "{},{},{},{}\n",
            group.name(),
            members.len(),
            fmt_float(mean(&|r| Some(r.self_similarity))),
            fmt_float(mean(&|r| r.mean_positive_entropy)),
        ));
    }
    let groups_path = config.groups_csv();
    fs::write(&groups_path, csv)?;

    let latents_path = config.latents_json();
    fs::write(
        &latents_path,
        serde_json::to_vec_pretty(&records).map_err(|e| CliError::Other(e.to_string()))?,
    )?;
    eprintln!("wrote {} and {}", latents_path.display(), groups_path.display());

    manifest.record_output(&latents_path)?;
    manifest.record_output(&groups_path)?;
    for p in &map_paths {
        manifest.record_output(p)?;
    }
    manifest.write(&config.out_dir)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn analyze_latents(
    config: &RunConfig,
    latents: &[usize],
    model: &tsae::sae::SaeModel,
    comp_norm: &tsae::residualize::TimestepNormalizer,
    artifact: &tsae::residualize::PreprocessArtifact,
    chain: Option<&tsae::residualize::RidgeChain>,
    val_ds: &tsae::dataset::TrajectoryDataset,
    encoded: &tsae::analysis::EncodedSet,
) -> CliResult<Vec<LatentRecord>> {
    let one = |k: usize| -> Result<LatentRecord, String> {
        let traj = decoder_to_activation_space(model, comp_norm, &artifact.act_norm, chain, k)
            .map_err(|e| e.to_string())?;
        let profile = temporal_profile(&traj).map_err(|e| e.to_string())?;
        let s_k = self_similarity(&traj).map_err(|e| e.to_string())?;
        let matrix = cosine_matrix(&traj);
        let top = top_activating_samples(encoded, k, config.analysis.top_samples)
            .map_err(|e| e.to_string())?;
        let mean_positive_entropy = if val_ds.grid().is_some() {
            let t = val_ds.num_timesteps();
            let vals: Vec<f64> = (0..t)
                .filter_map(|i| {
                    spatial_cosine_map(&traj, val_ds, config.analysis.map_image, i)
                        .ok()
                        .and_then(|m| positive_spatial_entropy(&m))
                })
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        } else {
            None
        };
        Ok(LatentRecord {
            latent: k,
            decoder_norms: traj.norms(),
            temporal_profile: profile.as_ref().map(|p| p.p.clone()),
            group: profile.map(|p| p.group),
            self_similarity: s_k,
            cosine_matrix: matrix.rows().into_iter().map(|r| r.to_vec()).collect(),
            mean_positive_entropy,
            top_samples: top,
        })
    };

    let workers = config.threads.max(1).min(latents.len().max(1));
    let mut slots: Vec<Option<Result<LatentRecord, String>>> =
        (0..latents.len()).map(|_| None).collect();
    if workers <= 1 {
        for (slot, k) in slots.iter_mut().zip(latents.iter()) {
            *slot = Some(one(*k));
        }
    } else {
        let chunk = latents.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (slot_chunk, latent_chunk) in slots.chunks_mut(chunk).zip(latents.chunks(chunk)) {
                scope.spawn(|| {
                    for (slot, k) in slot_chunk.iter_mut().zip(latent_chunk.iter()) {
                        *slot = Some(one(*k));
                    }
                });
            }
        });
    }
    slots
        .into_iter()
        .map(|s| s.expect("all latents analyzed").map_err(CliError::Numerical))
        .collect()
}
