//! `tsae fit-ridge`: fit the per-timestep normalizer, ridge chain, and both
//! component normalizers on the training split; write the `.ridge` sidecar
//! and the validation EV diagnostic CSV.

use std::fs;

use tsae::residualize::{
    build_sae_input_fit, fit_normalizer, ridge_ev_diagnostic, PreprocessArtifact, RidgeChain,
    SaeInputSpec,
};

use super::{fmt_float, load_dataset};
use crate::config::RunConfig;
use crate::errors::{CliError, CliResult};
use crate::manifest::Manifest;

pub fn run(config: &RunConfig, config_bytes: &[u8]) -> CliResult<()> {
    fs::create_dir_all(&config.out_dir)?;
    let mut manifest = Manifest::new("fit-ridge", config.seed, config_bytes);
    let train = load_dataset(&config.train_tsae(), &mut manifest)?;
    let val = load_dataset(&config.val_tsae(), &mut manifest)?;

    let act_norm = fit_normalizer(&train).map_err(|e| CliError::Numerical(e.to_string()))?;
    let train_n = act_norm
        .apply(train.data())
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let val_n = act_norm
        .apply(val.data())
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    eprintln!(
        "fitting ridge chain (lambda = {}) over {} transitions with {} threads",
        config.ridge.lambda,
        train.num_timesteps() - 1,
        config.threads
    );
    let chain = RidgeChain::fit_with_threads(&train_n, config.ridge.lambda, config.threads)
        .map_err(|e| CliError::Numerical(e.to_string()))?;

    let (_, comp_resid) = build_sae_input_fit(
        &train_n,
        Some(&chain),
        SaeInputSpec {
            residualized: true,
            concatenated: true,
        },
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;
    let (_, comp_raw) = build_sae_input_fit(
        &train_n,
        None,
        SaeInputSpec {
            residualized: false,
            concatenated: true,
        },
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;

    let evs =
        ridge_ev_diagnostic(&val_n, &chain).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut csv = String::from("transition,ev\n");
    for (i, ev) in evs.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, fmt_float(*ev)));
    }
    let csv_path = config.ridge_ev_csv();
    fs::write(&csv_path, csv)?;
    eprintln!("validation ridge EV per transition: {evs:?}");

    let artifact = PreprocessArtifact {
        act_norm,
        chain,
        comp_resid,
        comp_raw,
    };
    let ridge_path = config.ridge_path();
    tsae::residualize::save_preprocess(&artifact, &ridge_path)
        .map_err(|e| CliError::Other(e.to_string()))?;
    eprintln!("wrote {}", ridge_path.display());

    manifest.record_output(&ridge_path)?;
    manifest.record_output(&csv_path)?;
    manifest.write(&config.out_dir)?;
    Ok(())
}
