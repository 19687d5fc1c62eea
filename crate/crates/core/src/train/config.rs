use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AugmentOptions;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Weights of the cross-entropy and distillation terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the cross classifiers' cross entropy.
    pub lambda1: f64,
    /// Weight of the KL distillation term.
    pub lambda2: f64,
    /// Weight of the squared-error distillation term.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.0,
        }
    }
}

/// Which distillation term is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distill {
    None,
    Kl,
    L2,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.lambda2 > 0.0 && self.lambda3 > 0.0 {
            return Err(Error::Config(
                "at most one of lambda2 (kl) and lambda3 (l2) may be non-zero".into(),
            ));
        }
        Ok(())
    }

    pub fn distill(&self) -> Distill {
        if self.lambda2 > 0.0 {
            Distill::Kl
        } else if self.lambda3 > 0.0 {
            Distill::L2
        } else {
            Distill::None
        }
    }

    /// Weights for a distillation choice, keeping `lambda1`.
    pub fn with_distill(self, d: Distill) -> Self {
        let (lambda2, lambda3) = match d {
            Distill::None => (0.0, 0.0),
            Distill::Kl => (1.0, 0.0),
            Distill::L2 => (0.0, 1.0),
        };
        Self {
            lambda2,
            lambda3,
            ..self
        }
    }
}

impl std::str::FromStr for Distill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "kl" => Ok(Self::Kl),
            "l2" | "mse" => Ok(Self::L2),
            other => Err(Error::Config(format!("unknown distillation {other:?} (expected none, kl or l2)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; 0 means one pass worth of anchors over the training images.
    pub steps_per_epoch: usize,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    /// Stop after this many epochs without a new best validation accuracy; 0 disables.
    pub patience: usize,
    /// Fraction of each training class held out for validation.
    pub val_fraction: f64,
    /// Uniform anchor classes and uniform negative classes when sampling.
    pub balance: bool,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
    pub augment: AugmentOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 16,
            steps_per_epoch: 0,
            lr_decay: 0.98,
            patience: 10,
            val_fraction: 0.1,
            balance: true,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optimizer: AdamConfig::default(),
            augment: AugmentOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", o.lr));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
