//! `tsae inspect`: summarize a `.tsae` file as JSON (to stdout, or to a file
//! with `--out`).

use std::path::Path;

use serde::Serialize;

use crate::errors::{CliError, CliResult};

#[derive(Serialize)]
struct InspectReport {
    path: String,
    trajectories: usize,
    timesteps: usize,
    channels: usize,
    grid: Option<[usize; 2]>,
    images: usize,
    stride: u32,
    full_step_indices: Vec<u32>,
    per_timestep_mean_norm: Vec<f64>,
    value_min: f64,
    value_max: f64,
}

pub fn run(path: &Path, out: Option<&Path>) -> CliResult<()> {
    let ds = tsae::dataset::load_trajectories(path).map_err(|e| match e {
        tsae::dataset::DatasetError::Io(source) => CliError::MissingInput {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::bad_artifact(path, other),
    })?;

    let (n, t, _) = ds.data().dim();
    let per_timestep_mean_norm = (0..t)
        .map(|i| {
            let block = ds.block(i);
            block
                .rows()
                .into_iter()
                .map(|r| r.dot(&r).sqrt())
                .sum::<f64>()
                / n as f64
        })
        .collect();
    let report = InspectReport {
        path: path.display().to_string(),
        trajectories: n,
        timesteps: t,
        channels: ds.channels(),
        grid: ds.grid().map(|g| [g.h, g.w]),
        images: ds.num_units(),
        stride: ds.meta().stride,
        full_step_indices: ds.meta().full_step_indices.clone(),
        per_timestep_mean_norm,
        value_min: ds.data().iter().copied().fold(f64::INFINITY, f64::min),
        value_max: ds.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
    match out {
        Some(out_path) => {
            std::fs::write(out_path, json)?;
            eprintln!("wrote {}", out_path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}
