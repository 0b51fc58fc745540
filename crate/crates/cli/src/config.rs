//! Experiment configuration files (TOML).
//!
//! ```toml
//! model = "cnn-small"
//! seed = 0
//! repeats = 3
//! output_dir = "runs/cnn-wus"
//!
//! [dataset]
//! kind = "cifar10"
//! path = "data/cifar-10-batches-bin"
//! train_limit = 5000
//! val_limit = 1000
//!
//! [sgd]
//! epochs = 40
//!
//! [controller]
//! variant = "wus"
//! depth_k = 1
//! ```
//!
//! Every omitted optimizer or controller field falls back to the standard
//! recipe (lr 0.1 stepped ×0.1 every 30 epochs, momentum 0.9, weight decay
//! 1e-4, batch 128, 200 epochs, std threshold 0.71, patience 7, delta 0, 1L).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wus_core::controller::{ControllerConfig, Phase};
use wus_core::data::Normalization;
use wus_core::optim::SgdConfig;
use wus_core::{LayerSpec, Network32, Precision};

use crate::error::CliError;
use crate::presets::preset;

/// Overrides the `path` of file-backed datasets when set.
pub const DATA_ROOT_ENV: &str = "WUS_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        val_limit: Option<usize>,
        #[serde(default)]
        normalization: Normalization,
    },
    /// IDX files, resolved relative to `path`.
    Idx {
        #[serde(default)]
        path: Option<PathBuf>,
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
        #[serde(default)]
        normalization: Normalization,
    },
    Synthetic {
        n_train: usize,
        n_val: usize,
        classes: usize,
        shape: [usize; 3],
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        data_seed: u64,
        #[serde(default)]
        normalization: Normalization,
    },
}

fn default_noise() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    pub epochs: Vec<usize>,
    pub bins: usize,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        HistogramConfig {
            epochs: Vec::new(),
            bins: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    /// Forced phase per epoch instead of controller decisions.
    #[serde(default)]
    pub schedule: Option<Vec<Phase>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub histograms: HistogramConfig,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_repeats() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_eval_batch() -> usize {
    500
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the dataset path with the data-root override, if any.
    pub fn apply_data_root(&mut self, root: Option<PathBuf>) {
        let Some(root) = root else { return };
        match &mut self.dataset {
            DatasetConfig::Cifar10 { path, .. } | DatasetConfig::Idx { path, .. } => *path = Some(root),
            DatasetConfig::Synthetic { .. } => {}
        }
    }

    /// Per-sample input shape and class count, when known without reading files.
    pub fn declared_shape(&self) -> Option<([usize; 3], usize)> {
        match &self.dataset {
            DatasetConfig::Cifar10 { .. } => Some(([3, 32, 32], 10)),
            DatasetConfig::Synthetic { shape, classes, .. } => Some((*shape, *classes)),
            DatasetConfig::Idx { .. } => None,
        }
    }

    pub fn layer_specs(&self, classes: usize) -> Result<Vec<LayerSpec>, CliError> {
        match (&self.model, &self.layers) {
            (Some(name), None) => preset(name, classes),
            (None, Some(layers)) => Ok(layers.clone()),
            (Some(_), Some(_)) => Err(CliError::Config("set either `model` or `layers`, not both".into())),
            (None, None) => Err(CliError::Config("one of `model` or `layers` is required".into())),
        }
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.repeats == 0 {
            return Err(CliError::Config("repeats must be at least 1".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(CliError::Config("eval_batch_size must be at least 1".into()));
        }
        if self.histograms.bins < 2 {
            return Err(CliError::Config("histograms.bins must be at least 2".into()));
        }
        self.sgd.validate()?;
        if let Some(s) = &self.schedule {
            if s.len() < self.sgd.epochs {
                return Err(CliError::Config(format!(
                    "schedule lists {} phases for {} epochs",
                    s.len(),
                    self.sgd.epochs
                )));
            }
        }
        match &self.dataset {
            DatasetConfig::Cifar10 { path: None, .. } | DatasetConfig::Idx { path: None, .. } => {
                return Err(CliError::Config(format!(
                    "dataset.path is required (or set {DATA_ROOT_ENV})"
                )))
            }
            DatasetConfig::Synthetic {
                n_train,
                n_val,
                classes,
                noise,
                ..
            } => {
                if *classes == 0 || n_train < classes || *n_val == 0 || !(*noise >= 0.0) {
                    return Err(CliError::Config(
                        "synthetic dataset needs n_train ≥ classes ≥ 1, n_val ≥ 1 and noise ≥ 0".into(),
                    ));
                }
            }
            _ => {}
        }
        match self.declared_shape() {
            Some((shape, classes)) => self.validate_model(&shape, classes),
            None => self.layer_specs(1).map(|_| ()),
        }
    }

    /// Builds the network once (single precision) to check that the layers
    /// chain and that `depth_k` fits.
    pub fn validate_model(&self, shape: &[usize], classes: usize) -> Result<(), CliError> {
        let specs = self.layer_specs(classes)?;
        let net = Network32::build(&specs, shape, 0)?;
        if net.classes() < classes {
            return Err(CliError::Config(format!(
                "model emits {} logits for {classes} classes",
                net.classes()
            )));
        }
        self.controller.validate(net.parametric_count())?;
        Ok(())
    }
}
