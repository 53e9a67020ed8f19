use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{FusionMode, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer '{s}'"))),
        }
    }
}

/// Training variants: the full model and its four ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    None,
    SharedEncoder,
    TargetOnly,
    Unweighted,
    NoDetachment,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::SharedEncoder,
        Ablation::TargetOnly,
        Ablation::Unweighted,
        Ablation::NoDetachment,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::SharedEncoder => "shared_encoder",
            Ablation::TargetOnly => "target_only",
            Ablation::Unweighted => "unweighted",
            Ablation::NoDetachment => "no_detachment",
        }
    }

    /// Sets the model flags for this variant. `None` restores the default
    /// wiring: separate encoders, confidence-weighted fusion, detached
    /// target heads.
    pub fn apply(&self, config: &mut ModelConfig) {
        config.share_encoders = false;
        config.fusion_mode = FusionMode::ConfidenceWeighted;
        config.detach_target_heads = true;
        match self {
            Ablation::None => {}
            Ablation::SharedEncoder => config.share_encoders = true,
            Ablation::TargetOnly => config.fusion_mode = FusionMode::TargetOnly,
            Ablation::Unweighted => config.fusion_mode = FusionMode::ContextOnly,
            Ablation::NoDetachment => config.detach_target_heads = false,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// SGD only.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Write a checkpoint every this many epochs; 0 keeps only the first
    /// and last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            momentum: 0.0,
            batch_size: 16,
            epochs: 10,
            seed: 1,
            ablation: Ablation::None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (format!("train.{k}"), v);
        vec![
            kv("optimizer", self.optimizer.to_string()),
            kv("lr", self.lr.to_string()),
            kv("beta1", self.beta1.to_string()),
            kv("beta2", self.beta2.to_string()),
            kv("adam_eps", self.adam_eps.to_string()),
            kv("momentum", self.momentum.to_string()),
            kv("batch_size", self.batch_size.to_string()),
            kv("epochs", self.epochs.to_string()),
            kv("seed", self.seed.to_string()),
            kv("ablation", self.ablation.to_string()),
            kv("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    /// Applies every `train.*` entry of `kv`; other namespaces are ignored.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        use crate::model::parse;
        for (key, value) in kv {
            let Some(field) = key.strip_prefix("train.") else {
                continue;
            };
            match field {
                "optimizer" => self.optimizer = value.parse()?,
                "lr" => self.lr = parse(key, value)?,
                "beta1" => self.beta1 = parse(key, value)?,
                "beta2" => self.beta2 = parse(key, value)?,
                "adam_eps" => self.adam_eps = parse(key, value)?,
                "momentum" => self.momentum = parse(key, value)?,
                "batch_size" => self.batch_size = parse(key, value)?,
                "epochs" => self.epochs = parse(key, value)?,
                "seed" => self.seed = parse(key, value)?,
                "ablation" => self.ablation = value.parse()?,
                "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
                _ => return Err(Error::Config(format!("unknown key '{key}'"))),
            }
        }
        Ok(())
    }
}

/// SHA-256 over everything that must match for a resume to continue the
/// same run: the model config and every training setting except the epoch
/// budget and checkpoint schedule.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut h = Sha256::new();
    let skip = ["train.epochs", "train.checkpoint_every"];
    for (k, v) in model.to_kv().into_iter().chain(train.to_kv()) {
        if !skip.contains(&k.as_str()) {
            h.update(format!("{k}={v}\n").as_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 0.25,
            ablation: Ablation::NoDetachment,
            ..TrainConfig::default()
        };
        let map: BTreeMap<String, String> = cfg.to_kv().into_iter().collect();
        let mut back = TrainConfig::default();
        back.apply_kv(&map).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hash_ignores_epoch_budget() {
        let m = ModelConfig::tiny();
        let a = TrainConfig::default();
        let b = TrainConfig {
            epochs: 99,
            ..a.clone()
        };
        let c = TrainConfig {
            lr: 0.5,
            ..a.clone()
        };
        assert_eq!(config_hash(&m, &a), config_hash(&m, &b));
        assert_ne!(config_hash(&m, &a), config_hash(&m, &c));
        assert_eq!(config_hash(&m, &a).len(), 64);
    }

    #[test]
    fn ablations_set_model_flags() {
        let mut c = ModelConfig::default();
        Ablation::TargetOnly.apply(&mut c);
        assert_eq!(c.fusion_mode, FusionMode::TargetOnly);
        Ablation::NoDetachment.apply(&mut c);
        assert_eq!(c.fusion_mode, FusionMode::ConfidenceWeighted);
        assert!(!c.detach_target_heads);
        Ablation::SharedEncoder.apply(&mut c);
        assert!(c.share_encoders && c.detach_target_heads);
        assert!("bogus".parse::<Ablation>().is_err());
    }
}
