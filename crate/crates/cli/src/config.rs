//! Experiment configuration: one TOML file, every key optional.

use crate::error::{CliError, Result};
use mtl_core::data::DataConfig;
use mtl_core::layers::BackboneSpec;
use mtl_core::multitask::{ExperimentMode, FusionOptions, ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "MTL_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    /// Model initialization and shuffling seed; `train.seed` is overwritten
    /// with it when the config is resolved.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory written by `gen-data` and read by the other commands.
    pub path: PathBuf,
    pub generator: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneSpec,
    pub fusion: FusionOptions,
    pub portion_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mccr_constant: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub modes: Vec<ExperimentMode>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: ExperimentMode::SpsCdfaLnBn,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data/synthetic"),
            generator: DataConfig::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            fusion: FusionOptions::default(),
            portion_scale: 100.0,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mccr_constant: 1.0,
            batch_size: 64,
        }
    }
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            modes: ExperimentMode::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// `--config` wins, then `MTL_CONFIG`, then built-in defaults.
    pub fn locate(explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }

    /// Copies the top-level seed into the training section and validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.fusion.validate()?;
        self.model.backbone.validate()?;
        if !(self.model.portion_scale > 0.0 && self.model.portion_scale.is_finite()) {
            return Err(CliError::Usage("model.portion_scale must be positive".into()));
        }
        if !(self.eval.mccr_constant > 0.0) || self.eval.batch_size == 0 {
            return Err(CliError::Usage(
                "eval.mccr_constant must be positive and eval.batch_size non-zero".into(),
            ));
        }
        if self.ablation.seeds.is_empty() || self.ablation.modes.is_empty() {
            return Err(CliError::Usage("ablation needs at least one seed and one mode".into()));
        }
        Ok(())
    }

    /// Model spec for `mode` on a dataset with `n_classes` classes.
    pub fn model_spec(&self, mode: ExperimentMode, n_classes: usize) -> ModelSpec {
        ModelSpec {
            mode,
            n_classes,
            backbone: self.model.backbone.clone(),
            fusion: self.model.fusion.clone(),
            portion_scale: self.model.portion_scale,
            seed: self.seed,
        }
    }
}
