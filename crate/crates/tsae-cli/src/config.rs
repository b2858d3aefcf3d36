//! Declarative run configuration: one TOML file drives the whole pipeline.
//! Hyperparameter defaults mirror the reference setup (ridge penalty 0.1,
//! expansion 0.5, K_avg 50, Adam at 1e-4 / batch 256 / 30 epochs, auxiliary
//! weight 1/32, dead threshold 2000, auxiliary top-k 256).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsae::dataset::{Grid, SyntheticSpec};
use tsae::evalmetrics::BudgetProtocol;
use tsae::residualize::SaeInputSpec;
use tsae::sae::TrainConfig;

use crate::errors::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub ridge: RidgeConfig,
    #[serde(default)]
    pub sae: SaeConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub steer: SteerConfig,
}

fn default_seed() -> u64 {
    43
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<FilesConfig>,
}

fn default_val_fraction() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Image count when a grid is set, otherwise the trajectory count.
    pub units: usize,
    /// Optional `[height, width]` spatial grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    pub timesteps: usize,
    pub channels: usize,
    #[serde(default = "default_stride")]
    pub stride: u32,
    #[serde(default = "default_dynamics_scale")]
    pub dynamics_scale: f64,
    pub residual_rank: usize,
    pub residual_sparsity: f64,
    pub noise_std: f64,
}

fn default_stride() -> u32 {
    10
}

fn default_dynamics_scale() -> f64 {
    0.85
}

impl SyntheticConfig {
    pub fn to_spec(&self, seed: u64) -> SyntheticSpec {
        let grid = self.grid.map(|[h, w]| Grid { h, w });
        let n = match grid {
            Some(g) => self.units * g.tokens(),
            None => self.units,
        };
        SyntheticSpec {
            n,
            t: self.timesteps,
            d: self.channels,
            dynamics_scale: self.dynamics_scale,
            residual_rank: self.residual_rank,
            residual_sparsity: self.residual_sparsity,
            noise_std: self.noise_std,
            seed,
            grid,
            stride: self.stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesConfig {
    pub train: PathBuf,
    pub val: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RidgeConfig {
    pub lambda: f64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig {
            lambda: tsae::residualize::DEFAULT_RIDGE_LAMBDA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeConfig {
    pub residualized: bool,
    pub concatenated: bool,
    pub matryoshka: bool,
    pub expansion: f64,
    pub k_avg: usize,
}

impl Default for SaeConfig {
    fn default() -> Self {
        SaeConfig {
            residualized: true,
            concatenated: true,
            matryoshka: false,
            expansion: 0.5,
            k_avg: 50,
        }
    }
}

impl SaeConfig {
    pub fn input_spec(&self) -> SaeInputSpec {
        SaeInputSpec {
            residualized: self.residualized,
            concatenated: self.concatenated,
        }
    }
}

/// `[train]` section, mirroring the library training config. The trainer's
/// seed is derived from the run seed, not set here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub aux_weight: f64,
    pub dead_threshold_steps: usize,
    pub aux_topk: usize,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainSection {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            epochs: c.epochs,
            aux_weight: c.aux_weight,
            dead_threshold_steps: c.dead_threshold_steps,
            aux_topk: c.aux_topk,
            weight_decay: c.weight_decay,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            aux_weight: self.aux_weight,
            dead_threshold_steps: self.dead_threshold_steps,
            aux_topk: self.aux_topk,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: BudgetProtocol,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: BudgetProtocol::TrajectoryMatched,
            batch_size: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Latents to analyze; empty means every latent.
    #[serde(default)]
    pub latents: Vec<usize>,
    /// How many top-activating samples to record per latent.
    pub top_samples: usize,
    /// Image used for spatial cosine maps (grid datasets only).
    pub map_image: usize,
    /// Latents whose spatial maps are dumped as PGM files.
    #[serde(default)]
    pub map_latents: Vec<usize>,
    pub encode_batch_size: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            latents: Vec::new(),
            top_samples: 8,
            map_image: 0,
            map_latents: Vec::new(),
            encode_batch_size: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerMode {
    SingleFeature,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerConfig {
    pub mode: SteerMode,
    /// Latent id for single-feature steering.
    pub latent: usize,
    /// One plan (and steered output, when applying) per strength.
    pub alphas: Vec<f64>,
    /// Token ids for a local mask; empty means global.
    #[serde(default)]
    pub mask_tokens: Vec<u32>,
    pub total_steps: usize,
    /// Optional `.tsae` to steer; empty means plans only.
    #[serde(default)]
    pub apply_to: PathBuf,
    /// Transfer mode inputs.
    #[serde(default)]
    pub source_trajectories: PathBuf,
    #[serde(default)]
    pub target_trajectories: PathBuf,
    #[serde(default)]
    pub source_image: usize,
    #[serde(default)]
    pub target_image: usize,
    #[serde(default)]
    pub source_mask: Vec<u32>,
    #[serde(default)]
    pub target_mask: Vec<u32>,
    pub top_p: usize,
    pub lambda_src: f64,
    pub lambda_tgt: f64,
}

impl Default for SteerConfig {
    fn default() -> Self {
        SteerConfig {
            mode: SteerMode::SingleFeature,
            latent: 0,
            alphas: vec![tsae::steering::DEFAULT_TRANSFER_ALPHA],
            mask_tokens: Vec::new(),
            total_steps: 50,
            apply_to: PathBuf::new(),
            source_trajectories: PathBuf::new(),
            target_trajectories: PathBuf::new(),
            source_image: 0,
            target_image: 0,
            source_mask: Vec::new(),
            target_mask: Vec::new(),
            top_p: tsae::steering::DEFAULT_TRANSFER_TOP_P,
            lambda_src: 1.0,
            lambda_tgt: 1.0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> CliResult<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|source| CliError::MissingInput {
            path: path.to_path_buf(),
            source,
        })?;
        let text =
            String::from_utf8(bytes.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        Ok((Self::parse(&text)?, bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        match (&self.dataset.synthetic, &self.dataset.files) {
            (Some(_), Some(_)) => {
                return Err(CliError::config(
                    "dataset.synthetic and dataset.files are mutually exclusive",
                ))
            }
            (None, None) => {
                return Err(CliError::config(
                    "exactly one of dataset.synthetic or dataset.files is required",
                ))
            }
            _ => {}
        }
        if !(self.dataset.val_fraction > 0.0 && self.dataset.val_fraction < 1.0) {
            return Err(CliError::config(format!(
                "dataset.val_fraction must lie in (0, 1), got {}",
                self.dataset.val_fraction
            )));
        }
        if !self.ridge.lambda.is_finite() || self.ridge.lambda < 0.0 {
            return Err(CliError::config(format!(
                "ridge.lambda must be finite and >= 0, got {}",
                self.ridge.lambda
            )));
        }
        if !self.sae.expansion.is_finite() || self.sae.expansion <= 0.0 {
            return Err(CliError::config(format!(
                "sae.expansion must be positive, got {}",
                self.sae.expansion
            )));
        }
        if self.sae.k_avg == 0 {
            return Err(CliError::config("sae.k_avg must be positive"));
        }
        if self.sae.matryoshka && !self.sae.concatenated {
            return Err(CliError::config(
                "matryoshka models are trajectory-level: sae.concatenated must be true",
            ));
        }
        if self.sae.matryoshka && self.sae.residualized {
            return Err(CliError::config(
                "the matryoshka baseline trains on non-residualized inputs",
            ));
        }
        self.train
            .to_config(self.seed)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.eval.batch_size == 0 || self.analysis.encode_batch_size == 0 {
            return Err(CliError::config("batch sizes must be positive"));
        }
        if self.steer.alphas.is_empty() {
            return Err(CliError::config("steer.alphas must not be empty"));
        }
        if self.steer.total_steps == 0 {
            return Err(CliError::config("steer.total_steps must be positive"));
        }
        if self.steer.top_p == 0 {
            return Err(CliError::config("steer.top_p must be positive"));
        }
        Ok(())
    }

    // per-stage seeds derived from the run seed, keeping the RNG streams of
    // generation, splitting, and training decoupled
    pub fn synth_seed(&self) -> u64 {
        self.seed
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    // canonical artifact locations inside out_dir
    pub fn train_tsae(&self) -> PathBuf {
        match &self.dataset.files {
            Some(f) => f.train.clone(),
            None => self.out_dir.join("train.tsae"),
        }
    }

    pub fn val_tsae(&self) -> PathBuf {
        match &self.dataset.files {
            Some(f) => f.val.clone(),
            None => self.out_dir.join("val.tsae"),
        }
    }

    pub fn ridge_path(&self) -> PathBuf {
        self.out_dir.join("preproc.ridge")
    }

    pub fn ridge_ev_csv(&self) -> PathBuf {
        self.out_dir.join("ridge_ev.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("model.sae")
    }

    pub fn history_path(&self) -> PathBuf {
        self.out_dir.join("history.json")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.out_dir.join("metrics.csv")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.out_dir.join("metrics.json")
    }

    pub fn latents_json(&self) -> PathBuf {
        self.out_dir.join("latents.json")
    }

    pub fn groups_csv(&self) -> PathBuf {
        self.out_dir.join("groups.csv")
    }

    pub fn maps_dir(&self) -> PathBuf {
        self.out_dir.join("maps")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
out_dir = "runs/demo"

[dataset]
val_fraction = 0.1

[dataset.synthetic]
units = 8
timesteps = 4
channels = 8
residual_rank = 2
residual_sparsity = 0.2
noise_std = 0.3
"#
        .to_string()
    }

    #[test]
    fn parses_minimal_config_with_reference_defaults() {
        let config = RunConfig::parse(&minimal_toml()).unwrap();
        assert_eq!(config.seed, 43);
        assert_eq!(config.ridge.lambda, 0.1);
        assert_eq!(config.sae.expansion, 0.5);
        assert_eq!(config.sae.k_avg, 50);
        assert_eq!(config.train.batch_size, 256);
        assert_eq!(config.train.epochs, 30);
        assert_eq!(config.train.aux_weight, 1.0 / 32.0);
        assert_eq!(config.eval.protocol, BudgetProtocol::TrajectoryMatched);
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let config = RunConfig::parse(&minimal_toml()).unwrap();
        let text = config.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn rejects_zero_or_two_dataset_sources() {
        let no_source = r#"
out_dir = "x"
[dataset]
"#;
        assert!(RunConfig::parse(no_source).is_err());

        let both = format!(
            "{}\n[dataset.files]\ntrain = \"a.tsae\"\nval = \"b.tsae\"\n",
            minimal_toml()
        );
        assert!(RunConfig::parse(&both).is_err());
    }

    #[test]
    fn rejects_unknown_fields() {
        let bad = format!("{}\nbanana = 3\n", minimal_toml());
        assert!(RunConfig::parse(&bad).is_err());
    }

    #[test]
    fn rejects_matryoshka_misconfiguration() {
        let mut config = RunConfig::parse(&minimal_toml()).unwrap();
        config.sae.matryoshka = true;
        config.sae.residualized = true;
        config.sae.concatenated = true;
        assert!(config.validate().is_err());
        config.sae.residualized = false;
        assert!(config.validate().is_ok());
    }
}
