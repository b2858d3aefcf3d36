pub mod analyze;
pub mod eval;
pub mod fit_ridge;
pub mod inspect;
pub mod steer;
pub mod synth;
pub mod train;

use std::path::Path;

use tsae::dataset::TrajectoryDataset;
use tsae::residualize::PreprocessArtifact;
use tsae::sae::Checkpoint;

use crate::errors::{CliError, CliResult};
use crate::manifest::{sha256_file_raw, Manifest};

pub fn load_dataset(path: &Path, manifest: &mut Manifest) -> CliResult<TrajectoryDataset> {
    manifest.record_input(path)?;
    tsae::dataset::load_trajectories(path).map_err(|e| classify_dataset_error(path, e))
}

fn classify_dataset_error(path: &Path, e: tsae::dataset::DatasetError) -> CliError {
    match e {
        tsae::dataset::DatasetError::Io(source) => CliError::MissingInput {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::bad_artifact(path, other),
    }
}

pub fn load_ridge(path: &Path, manifest: &mut Manifest) -> CliResult<PreprocessArtifact> {
    manifest.record_input(path)?;
    tsae::residualize::load_preprocess(path).map_err(|e| match e {
        tsae::residualize::ResidualizeError::Io(source) => CliError::MissingInput {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::bad_artifact(path, other),
    })
}

/// Loads a checkpoint and verifies it was trained against the given ridge
/// artifact by content hash.
pub fn load_checkpoint_chained(
    ckpt_path: &Path,
    ridge_path: &Path,
    manifest: &mut Manifest,
) -> CliResult<Checkpoint> {
    manifest.record_input(ckpt_path)?;
    let ckpt = tsae::sae::load_checkpoint(ckpt_path).map_err(|e| match e {
        tsae::sae::SaeError::Io(source) => CliError::MissingInput {
            path: ckpt_path.to_path_buf(),
            source,
        },
        other => CliError::bad_artifact(ckpt_path, other),
    })?;
    let ridge_hash = sha256_file_raw(ridge_path)?;
    if ridge_hash != ckpt.header.ridge_hash {
        return Err(CliError::HashMismatch {
            artifact: ckpt_path.display().to_string(),
            path: ridge_path.to_path_buf(),
            expected: hex::encode(ckpt.header.ridge_hash),
            found: hex::encode(ridge_hash),
        });
    }
    Ok(ckpt)
}

/// Deterministic float formatting for CSV cells (shortest roundtrip form).
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}
