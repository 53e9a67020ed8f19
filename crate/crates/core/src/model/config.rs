use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the final distribution `y_p` is formed from the two heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// `p * y_t + (1 - p) * y_tc`.
    ConfidenceWeighted,
    /// `y_t` alone.
    TargetOnly,
    /// `y_tc` alone.
    ContextOnly,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::ConfidenceWeighted => "confidence_weighted",
            FusionMode::TargetOnly => "target_only",
            FusionMode::ContextOnly => "context_only",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence_weighted" => Ok(FusionMode::ConfidenceWeighted),
            "target_only" => Ok(FusionMode::TargetOnly),
            "context_only" => Ok(FusionMode::ContextOnly),
            other => Err(Error::Config(format!("unknown fusion mode '{other}'"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Side of the square target and context inputs.
    pub image_side: usize,
    /// Feature channels `D` of both encoders and of every token.
    pub feat_channels: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout_rate: f64,
    pub share_encoders: bool,
    pub fusion_mode: FusionMode,
    pub detach_target_heads: bool,
    /// Widths of the first two encoder blocks; the third emits `D`.
    pub encoder_channels: [usize; 2],
    pub confidence_hidden: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 8,
            image_side: 64,
            feat_channels: 64,
            feat_h: 4,
            feat_w: 4,
            decoder_layers: 2,
            heads: 4,
            mlp_hidden: 128,
            dropout_rate: 0.1,
            share_encoders: false,
            fusion_mode: FusionMode::ConfidenceWeighted,
            detach_target_heads: true,
            encoder_channels: [16, 32],
            confidence_hidden: 32,
            ln_eps: 1e-5,
        }
    }
}

/// Number of stride-2 encoder blocks.
pub const ENCODER_BLOCKS: usize = 3;

impl ModelConfig {
    /// Smallest configuration used by the finite-difference suite.
    pub fn tiny() -> Self {
        ModelConfig {
            num_classes: 3,
            image_side: 16,
            feat_channels: 8,
            feat_h: 2,
            feat_w: 2,
            decoder_layers: 1,
            heads: 2,
            mlp_hidden: 16,
            encoder_channels: [4, 8],
            confidence_hidden: 8,
            ..ModelConfig::default()
        }
    }

    /// Token count `L = H * W`.
    pub fn tokens(&self) -> usize {
        self.feat_h * self.feat_w
    }

    pub fn head_dim(&self) -> usize {
        self.feat_channels / self.heads
    }

    /// Spatial side after the three stride-2 blocks.
    pub fn encoder_side(&self) -> usize {
        self.image_side >> ENCODER_BLOCKS
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if self.heads == 0 || !self.feat_channels.is_multiple_of(self.heads) {
            return fail(format!(
                "feat_channels {} not divisible by heads {}",
                self.feat_channels, self.heads
            ));
        }
        if self.feat_h == 0 || self.feat_w == 0 {
            return fail("feature grid must be at least 1x1".into());
        }
        if self.decoder_layers == 0 || self.mlp_hidden == 0 || self.confidence_hidden == 0 {
            return fail(
                "decoder_layers, mlp_hidden and confidence_hidden must be positive".into(),
            );
        }
        if self.encoder_channels.contains(&0) {
            return fail("encoder channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return fail("ln_eps must be positive".into());
        }
        let side = self.encoder_side();
        if !self.image_side.is_multiple_of(1 << ENCODER_BLOCKS) || side == 0 {
            return fail(format!(
                "image_side {} must be a positive multiple of 8",
                self.image_side
            ));
        }
        if !side.is_multiple_of(self.feat_h) || !side.is_multiple_of(self.feat_w) {
            return fail(format!(
                "encoder output {side}x{side} cannot be pooled to a {}x{} grid",
                self.feat_h, self.feat_w
            ));
        }
        if side / self.feat_h != side / self.feat_w {
            return fail("feature grid must use a square pooling window".into());
        }
        Ok(())
    }

    /// Flat `model.*` key/value view, in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (format!("model.{k}"), v);
        vec![
            kv("num_classes", self.num_classes.to_string()),
            kv("image_side", self.image_side.to_string()),
            kv("feat_channels", self.feat_channels.to_string()),
            kv("feat_h", self.feat_h.to_string()),
            kv("feat_w", self.feat_w.to_string()),
            kv("decoder_layers", self.decoder_layers.to_string()),
            kv("heads", self.heads.to_string()),
            kv("mlp_hidden", self.mlp_hidden.to_string()),
            kv("dropout_rate", self.dropout_rate.to_string()),
            kv("share_encoders", self.share_encoders.to_string()),
            kv("fusion_mode", self.fusion_mode.to_string()),
            kv("detach_target_heads", self.detach_target_heads.to_string()),
            kv(
                "encoder_channels",
                format!("{},{}", self.encoder_channels[0], self.encoder_channels[1]),
            ),
            kv("confidence_hidden", self.confidence_hidden.to_string()),
            kv("ln_eps", self.ln_eps.to_string()),
        ]
    }

    /// Applies every `model.*` entry of `kv` on top of `self`. Unknown
    /// `model.*` keys are rejected; other namespaces are ignored.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in kv {
            let Some(field) = key.strip_prefix("model.") else {
                continue;
            };
            match field {
                "num_classes" => self.num_classes = parse(key, value)?,
                "image_side" => self.image_side = parse(key, value)?,
                "feat_channels" => self.feat_channels = parse(key, value)?,
                "feat_h" => self.feat_h = parse(key, value)?,
                "feat_w" => self.feat_w = parse(key, value)?,
                "decoder_layers" => self.decoder_layers = parse(key, value)?,
                "heads" => self.heads = parse(key, value)?,
                "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
                "dropout_rate" => self.dropout_rate = parse(key, value)?,
                "share_encoders" => self.share_encoders = parse(key, value)?,
                "fusion_mode" => self.fusion_mode = value.parse()?,
                "detach_target_heads" => self.detach_target_heads = parse(key, value)?,
                "encoder_channels" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    if parts.len() != 2 {
                        return Err(Error::Config(format!(
                            "{key} needs two comma-separated widths"
                        )));
                    }
                    self.encoder_channels = [parse(key, parts[0])?, parse(key, parts[1])?];
                }
                "confidence_hidden" => self.confidence_hidden = parse(key, value)?,
                "ln_eps" => self.ln_eps = parse(key, value)?,
                _ => return Err(Error::Config(format!("unknown key '{key}'"))),
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        cfg.apply_kv(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_tiny_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().tokens(), 16);
    }

    #[test]
    fn paper_scale_grid_is_valid() {
        let cfg = ModelConfig {
            image_side: 224,
            feat_channels: 1664,
            feat_h: 7,
            feat_w: 7,
            decoder_layers: 6,
            heads: 8,
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_head_split() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            fusion_mode: FusionMode::TargetOnly,
            share_encoders: true,
            dropout_rate: 0.25,
            ..ModelConfig::tiny()
        };
        let kv: BTreeMap<_, _> = cfg.to_kv().into_iter().collect();
        assert_eq!(ModelConfig::from_kv(&kv).unwrap(), cfg);
    }
}
