use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::encoders::{ImageEncoderConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{LossToggles, LossWeights, TAU_PRIME_MAX, TAU_PRIME_MIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Sequence length after framing and padding.
    pub max_length: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { max_length: 64 }
    }
}

/// Parameters of the heavy (instance-contrast) augmentation family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Crop area as a fraction of the image, sampled uniformly.
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    /// Relative aspect distortion of the crop, sampled log-uniformly.
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_p: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_scale_min: 0.6,
            crop_scale_max: 1.0,
            crop_ratio_min: 0.75,
            crop_ratio_max: 4.0 / 3.0,
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.3,
            grayscale_p: 0.2,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("augmentation.{name} = {v} outside [0, 1]")))
            }
        };
        unit("flip_p", self.flip_p)?;
        unit("jitter_p", self.jitter_p)?;
        unit("grayscale_p", self.grayscale_p)?;
        unit("brightness", self.brightness)?;
        unit("contrast", self.contrast)?;
        unit("saturation", self.saturation)?;
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= self.crop_scale_max && self.crop_scale_max <= 1.0) {
            return Err(Error::Config("augmentation crop scale must satisfy 0 < min <= max <= 1".into()));
        }
        if !(self.crop_ratio_min > 0.0 && self.crop_ratio_min <= self.crop_ratio_max) {
            return Err(Error::Config("augmentation crop ratio must satisfy 0 < min <= max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Capacity of every negative queue.
    pub k: usize,
    /// Number of mined attributes.
    pub m: usize,
    /// Joint embedding dimension.
    pub d: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub tau_prime_init: f64,
    pub momentum_m: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub seed: u64,
    /// Drop queued negatives that came from the query's own instance.
    /// Only matters once the queue spans the dataset (K >= N).
    pub mask_same_instance: bool,
    pub toggles: LossToggles,
    pub image_encoder: ImageEncoderConfig,
    pub text_encoder: TextEncoderConfig,
    pub tokenizer: TokenizerConfig,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 140,
            batch_size: 2048,
            base_lr: 1e-3,
            warmup_epochs: 7.0,
            min_lr: 1e-6,
            weight_decay: 0.1,
            k: 65536,
            m: 1359,
            d: 128,
            alpha: 0.2,
            beta: 0.5,
            gamma: 0.01,
            tau: 0.07,
            tau_prime_init: 0.07,
            momentum_m: 0.999,
            grad_clip: 5.0,
            seed: 0,
            mask_same_instance: true,
            toggles: LossToggles::default(),
            image_encoder: ImageEncoderConfig::default(),
            text_encoder: TextEncoderConfig::default(),
            tokenizer: TokenizerConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-sized profile: batch 32, K=256, M=16, D=128, 64x32 images.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            base_lr: 1e-3,
            warmup_epochs: 1.0,
            k: 256,
            m: 16,
            d: 128,
            momentum_m: 0.99,
            image_encoder: ImageEncoderConfig {
                height: 64,
                width: 32,
                channels: vec![16, 32, 64, 128],
                kernel: 3,
                stride: 2,
            },
            text_encoder: TextEncoderConfig {
                hidden: 64,
                layers: 2,
                heads: 4,
                ffn: 128,
                max_length: 16,
            },
            tokenizer: TokenizerConfig { max_length: 16 },
            // Cards differ mostly by colour; grayscale would erase identity.
            augmentation: AugmentationConfig {
                crop_scale_min: 0.8,
                brightness: 0.2,
                contrast: 0.2,
                saturation: 0.2,
                grayscale_p: 0.0,
                ..AugmentationConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            tau: self.tau,
            tau_prime: self.tau_prime_init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.batch_size > self.k {
            return Err(Error::Config(format!(
                "batch_size {} exceeds queue capacity k = {}",
                self.batch_size, self.k
            )));
        }
        if self.m == 0 || self.d == 0 {
            return Err(Error::Config("m and d must be positive".into()));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config("learning rates must satisfy 0 < min_lr <= base_lr".into()));
        }
        if !(self.warmup_epochs >= 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config(
                "warmup_epochs and weight_decay must be >= 0, grad_clip > 0".into(),
            ));
        }
        if !(TAU_PRIME_MIN..=TAU_PRIME_MAX).contains(&self.tau_prime_init) {
            return Err(Error::Config(format!(
                "tau_prime_init {} outside [{TAU_PRIME_MIN}, {TAU_PRIME_MAX}]",
                self.tau_prime_init
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum_m) {
            return Err(Error::Config(format!("momentum_m {} outside [0, 1]", self.momentum_m)));
        }
        if self.text_encoder.max_length != self.tokenizer.max_length {
            return Err(Error::Config(format!(
                "text_encoder.max_length {} differs from tokenizer.max_length {}",
                self.text_encoder.max_length, self.tokenizer.max_length
            )));
        }
        if self.image_encoder.channels.is_empty() || self.image_encoder.kernel == 0 || self.image_encoder.stride == 0 {
            return Err(Error::Config("image encoder needs channels, kernel and stride".into()));
        }
        self.loss_weights().validate()?;
        self.toggles.validate()?;
        self.augmentation.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex(&Sha256::digest(json.as_bytes()))
    }

    /// Parses `key = value` lines with `# comments` and `[section]` headers.
    ///
    /// A leading `profile = desk|paper` picks the base values; every other
    /// key overrides one field. Keys outside a section (or in `[train]`)
    /// address top-level fields; dotted keys such as `toggles.ssl` also work.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut base = TrainConfig::default();
        let mut entries = Vec::new();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = n + 1;
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = if name == "train" { None } else { Some(name.to_string()) };
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value at line {lineno}")))?;
            let key = key.trim();
            let value = value.trim();
            if section.is_none() && key == "profile" {
                if !entries.is_empty() {
                    return Err(Error::Config(format!("profile must precede other keys (line {lineno})")));
                }
                base = match value {
                    "desk" => TrainConfig::desk(),
                    "paper" => TrainConfig::default(),
                    other => return Err(Error::Config(format!("unknown profile {other:?} at line {lineno}"))),
                };
                continue;
            }
            let path = match &section {
                Some(s) => format!("{s}.{key}"),
                None => key.to_string(),
            };
            entries.push((lineno, path, value.to_string()));
        }

        let mut tree = serde_json::to_value(&base).expect("config serialises");
        for (lineno, path, value) in entries {
            set_path(&mut tree, &path, &value)
                .map_err(|msg| Error::Config(format!("{msg} at line {lineno}")))?;
        }
        let cfg: TrainConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_config_str(&text)
    }

    /// Renders every field in the format accepted by [`Self::from_config_str`].
    pub fn to_config_string(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serialises");
        let Value::Object(root) = tree else {
            unreachable!("config is an object")
        };
        let mut out = String::new();
        let mut sections = Vec::new();
        for (k, v) in &root {
            match v {
                Value::Object(m) => sections.push((k, m)),
                other => out.push_str(&format!("{k} = {}\n", render(other))),
            }
        }
        for (name, m) in sections {
            out.push_str(&format!("\n[{name}]\n"));
            for (k, v) in m {
                out.push_str(&format!("{k} = {}\n", render(v)));
            }
        }
        out
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn render(v: &Value) -> String {
    match v {
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(", "),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_path(tree: &mut Value, path: &str, raw: &str) -> std::result::Result<(), String> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = node.as_object_mut().ok_or_else(|| format!("{path:?} is not a section"))?;
        let child = map.get_mut(*part).ok_or_else(|| format!("unknown key {path:?}"))?;
        if i + 1 == parts.len() {
            *child = coerce(child, raw).map_err(|e| format!("bad value for {path}: {e}"))?;
            return Ok(());
        }
        node = child;
    }
    unreachable!("path has at least one component")
}

/// Parses `raw` with the JSON type of the current value.
fn coerce(current: &Value, raw: &str) -> std::result::Result<Value, String> {
    match current {
        Value::Bool(_) => match raw {
            "true" | "1" | "yes" | "on" => Ok(Value::Bool(true)),
            "false" | "0" | "no" | "off" => Ok(Value::Bool(false)),
            _ => Err(format!("expected a boolean, got {raw:?}")),
        },
        Value::Number(n) if n.is_u64() => raw
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| format!("expected a non-negative integer, got {raw:?}")),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Value::from)
            .ok_or_else(|| format!("expected a number, got {raw:?}")),
        Value::Array(items) => {
            let template = items.first().cloned().unwrap_or(Value::from(0u64));
            raw.split(',')
                .map(|s| coerce(&template, s.trim()))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Object(_) => Err("a section cannot take a value".into()),
        Value::Null => Err("field cannot be set".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_full_scale_values() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.k, c.m), (140, 2048, 65536, 1359));
        assert_eq!((c.base_lr, c.min_lr, c.warmup_epochs, c.weight_decay), (1e-3, 1e-6, 7.0, 0.1));
        assert_eq!((c.alpha, c.beta, c.gamma, c.tau, c.tau_prime_init), (0.2, 0.5, 0.01, 0.07, 0.07));
        c.validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn every_field_round_trips_through_text() {
        let mut c = TrainConfig::desk();
        c.seed = 99;
        c.toggles.mac_soft = false;
        c.image_encoder.channels = vec![4, 8];
        c.augmentation.grayscale_p = 0.05;
        let back = TrainConfig::from_config_str(&c.to_config_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn sections_comments_and_profiles() {
        let text = "profile = desk # base\n\nseed = 7\n[toggles]\nmac_soft = false\n[image_encoder]\nchannels = 8, 16\n";
        let c = TrainConfig::from_config_str(text).unwrap();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.seed, 7);
        assert!(!c.toggles.mac_soft);
        assert_eq!(c.image_encoder.channels, vec![8, 16]);
        assert_ne!(c.hash(), TrainConfig::desk().hash());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::from_config_str("bogus = 1").is_err());
        assert!(TrainConfig::from_config_str("epochs = -3").is_err());
        assert!(TrainConfig::from_config_str("[toggles]\nssl = maybe").is_err());
        assert!(TrainConfig::from_config_str("profile = desk\nbatch_size = 512").is_err());
        assert!(TrainConfig::from_config_str("seed = 1\nprofile = desk").is_err());
        assert!(TrainConfig::from_config_str("just text").is_err());
    }
}
