use std::fmt::Write as _;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionRule;
use crate::loss::LossGate;
use crate::network::ArchConfig;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Optional cap on optimizer steps; overrides the epoch count when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
    pub fusion_rule: FusionRule,
    pub loss_gate: LossGate,
    pub depth: usize,
    pub window_stride: usize,
    pub base_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 4,
            steps: None,
            batch_size: 4,
            crop: 256,
            seed: DEFAULT_SEED,
            fusion_rule: FusionRule::Mapping,
            loss_gate: LossGate::Var,
            depth: 3,
            window_stride: 1,
            base_channels: 16,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in echo order.
pub const CONFIG_KEYS: [&str; 11] = [
    "lr",
    "epochs",
    "steps",
    "batch",
    "crop",
    "seed",
    "fusion",
    "loss_gate",
    "depth",
    "stride",
    "base_channels",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn arch(&self) -> Result<ArchConfig> {
        Ok(ArchConfig {
            encoder: EncoderConfig::new(self.depth, self.base_channels)?,
            fusion_rule: self.fusion_rule,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.window_stride == 0 {
            return Err(Error::Config("epochs, batch and stride must be at least 1".into()));
        }
        if self.steps == Some(0) {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        let arch = self.arch()?;
        let m = arch.encoder.size_multiple();
        if self.crop < 11 || !self.crop.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "crop {} must be at least 11 and a multiple of {m} for depth {}",
                self.crop, self.depth
            )));
        }
        Ok(())
    }

    /// Sets one field from its `key=value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "lr" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "steps" => {
                self.steps = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "batch" => self.batch_size = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "fusion" => self.fusion_rule = value.trim().parse()?,
            "loss_gate" => self.loss_gate = value.trim().parse()?,
            "depth" => self.depth = parse(key, value)?,
            "stride" => self.window_stride = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}`; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// One `key=value` line per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let steps = self.steps.map_or("none".to_string(), |v| v.to_string());
        for (k, v) in [
            ("lr", self.learning_rate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("steps", steps),
            ("batch", self.batch_size.to_string()),
            ("crop", self.crop.to_string()),
            ("seed", self.seed.to_string()),
            ("fusion", self.fusion_rule.to_string()),
            ("loss_gate", self.loss_gate.to_string()),
            ("depth", self.depth.to_string()),
            ("stride", self.window_stride.to_string()),
            ("base_channels", self.base_channels.to_string()),
        ] {
            writeln!(s, "{k}={v}").expect("writing to a String");
        }
        s
    }

    /// Parses `key=value` lines over the defaults; blank lines and `#`
    /// comments are skipped, unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = TrainConfig {
            learning_rate: 3e-4,
            steps: Some(17),
            fusion_rule: FusionRule::Add,
            loss_gate: LossGate::Mean,
            depth: 4,
            ..TrainConfig::default()
        };
        let text = cfg.to_kv();
        assert_eq!(TrainConfig::from_kv(&text).unwrap(), cfg);
        assert_eq!(TrainConfig::from_kv(&text).unwrap().to_kv(), text);
    }

    #[test]
    fn defaults_and_rejections() {
        let d = TrainConfig::default();
        assert_eq!((d.learning_rate, d.epochs, d.crop), (1e-4, 4, 256));
        assert!(d.validate().is_ok());
        assert!(TrainConfig::from_kv("colour=red").is_err());
        assert!(TrainConfig::from_kv("# note\n\nlr=0.5\n").is_ok());
        let bad = TrainConfig { crop: 62, ..d.clone() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { learning_rate: -1.0, ..d };
        assert!(bad.validate().is_err());
    }
}
