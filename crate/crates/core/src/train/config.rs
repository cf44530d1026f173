use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Augmentation;
use crate::error::{Error, Result};
use crate::nn::{Architecture, OptimizerConfig};
use crate::pca::DENSE_SAMPLE_BUDGET;
use crate::transform::TransformPlan;

/// Learning rate from `epoch` (0-based, global clock) onwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub epoch: usize,
    pub learning_rate: f64,
}

/// Per-epoch effective dimensionality of layer inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub layers: Vec<String>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Training images (unaugmented, fixed across epochs) used for the PCA.
    #[serde(default = "default_trace_samples")]
    pub samples: usize,
    /// Also trace before the first epoch.
    #[serde(default)]
    pub initial: bool,
}

fn default_tau() -> f64 {
    0.1
}

fn default_trace_samples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run identifier; empty derives one from architecture and seed.
    pub name: String,
    pub architecture: Architecture,
    /// `mnist` or `cifar10`; empty picks the architecture's dataset.
    pub dataset: String,
    pub optimizer: OptimizerConfig,
    pub schedule: Vec<LrStep>,
    pub l2: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of training images held out for validation.
    pub validation_fraction: f64,
    /// Train on a stratified subset of this many images.
    pub train_subset: Option<usize>,
    pub augmentation: Augmentation,
    /// Stop after this many epochs without a new best validation accuracy.
    pub early_stopping: Option<usize>,
    /// Training images used to fit the transform's PCA bases.
    pub pca_samples: usize,
    pub plan: Option<TransformPlan>,
    pub trace: Option<TraceConfig>,
    /// Write checkpoints at the transform boundary and the end.
    pub checkpoints: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            architecture: Architecture::MlpMnist { hidden: 256 },
            dataset: String::new(),
            optimizer: OptimizerConfig::adam(1e-3),
            schedule: Vec::new(),
            l2: 0.0,
            batch_size: 128,
            eval_batch_size: 500,
            epochs: 10,
            seed: 0,
            validation_fraction: 0.1,
            train_subset: None,
            augmentation: Augmentation::None,
            early_stopping: None,
            pca_samples: DENSE_SAMPLE_BUDGET,
            plan: None,
            trace: None,
            checkpoints: true,
        }
    }
}

impl RunConfig {
    pub fn run_id(&self) -> String {
        if self.name.is_empty() {
            let kind = if self.plan.is_some() { "pcn" } else { "base" };
            format!("{}-{kind}-s{}", self.architecture, self.seed)
        } else {
            self.name.clone()
        }
    }

    pub fn dataset_name(&self) -> String {
        if self.dataset.is_empty() {
            self.architecture.dataset().to_string()
        } else {
            self.dataset.clone()
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|s| s.epoch <= epoch)
            .max_by_key(|s| s.epoch)
            .map_or(self.optimizer.learning_rate(), |s| s.learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::config(format!("L2 coefficient {} is negative", self.l2)));
        }
        for s in &self.schedule {
            if s.epoch >= self.epochs || !(s.learning_rate >= 0.0) {
                return Err(Error::config(format!(
                    "schedule step at epoch {} (lr {}) outside the {} training epochs",
                    s.epoch, s.learning_rate, self.epochs
                )));
            }
        }
        if self.augmentation != Augmentation::None && self.architecture.input_shape()[..2] != [32, 32] {
            return Err(Error::config(format!("{} augmentation needs 32×32 inputs", self.augmentation)));
        }
        if self.early_stopping == Some(0) {
            return Err(Error::config("early-stopping patience must be positive"));
        }
        if self.early_stopping.is_some() && self.validation_fraction == 0.0 {
            return Err(Error::config("early stopping needs a validation split"));
        }
        if let Some(p) = &self.plan {
            if p.transform_epoch + p.post_epochs != self.epochs {
                return Err(Error::config(format!(
                    "plan trains {} + {} epochs but the run has {}",
                    p.transform_epoch, p.post_epochs, self.epochs
                )));
            }
            if self.pca_samples < 2 {
                return Err(Error::config("at least 2 PCA samples are needed"));
            }
        }
        if let Some(t) = &self.trace {
            if t.layers.is_empty() || t.samples < 2 || !(t.tau >= 0.0) {
                return Err(Error::config("trace needs layers, at least 2 samples and a non-negative tau"));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p)
            .map_err(|e| Error::config(format!("cannot read config file {}: {e}", p.display())))?;
        let c: RunConfig = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
        c.validate()?;
        Ok(c)
    }
}
