//! `tsae synth`: generate planted-dynamics trajectories and write the
//! train/validation `.tsae` pair.

use std::fs;

use tsae::dataset::{generate_synthetic, save_trajectories, split};

use crate::config::RunConfig;
use crate::errors::{CliError, CliResult};
use crate::manifest::Manifest;

pub fn run(config: &RunConfig, config_bytes: &[u8]) -> CliResult<()> {
    let synth = config
        .dataset
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::config("synth needs a [dataset.synthetic] section"))?;
    fs::create_dir_all(&config.out_dir)?;
    let mut manifest = Manifest::new("synth", config.seed, config_bytes);

    let spec = synth.to_spec(config.synth_seed());
    eprintln!(
        "generating {} trajectories (T={}, d={}) with seed {}",
        spec.n, spec.t, spec.d, spec.seed
    );
    let (ds, _ground_truth) =
        generate_synthetic(&spec).map_err(|e| CliError::config(e.to_string()))?;
    let (train, val) = split(&ds, config.dataset.val_fraction, config.split_seed())
        .map_err(|e| CliError::config(e.to_string()))?;

    let train_path = config.out_dir.join("train.tsae");
    let val_path = config.out_dir.join("val.tsae");
    save_trajectories(&train, &train_path).map_err(|e| CliError::Other(e.to_string()))?;
    save_trajectories(&val, &val_path).map_err(|e| CliError::Other(e.to_string()))?;
    eprintln!(
        "wrote {} ({} trajectories) and {} ({})",
        train_path.display(),
        train.num_trajectories(),
        val_path.display(),
        val.num_trajectories()
    );

    manifest.record_output(&train_path)?;
    manifest.record_output(&val_path)?;
    manifest.write(&config.out_dir)?;
    Ok(())
}
