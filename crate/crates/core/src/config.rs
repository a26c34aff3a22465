//! Run configuration: TOML file plus dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::datamodel::RegionVocabulary;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ModelSpec, Variant};
use crate::nn::BackboneConfig;
use crate::sampler::SamplerConfig;
use crate::synthdata::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory that manifest image paths are relative to.
    pub root: String,
    pub train: String,
    pub query: String,
    pub gallery: String,
    /// Region vocabulary file; empty for the built-in vocabulary.
    pub vocabulary: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data".into(),
            train: "train.tsv".into(),
            query: "query.tsv".into(),
            gallery: "gallery.tsv".into(),
            vocabulary: String::new(),
        }
    }
}

impl DataConfig {
    /// Manifest path: relative names resolve against `root`.
    pub fn manifest(&self, name: &str) -> PathBuf {
        let p = Path::new(name);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            Path::new(&self.root).join(p)
        }
    }

    pub fn vocabulary(&self) -> Result<RegionVocabulary> {
        if self.vocabulary.is_empty() {
            Ok(RegionVocabulary::default())
        } else {
            RegionVocabulary::from_toml_file(Path::new(&self.vocabulary))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub height: usize,
    pub width: usize,
    pub ikt_kernel: usize,
    /// Attention-stream pretraining epochs.
    pub phase1_epochs: usize,
    /// Joint training epochs.
    pub phase2_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fractions of the joint phase at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    pub seed: u64,
    /// Random horizontal mirroring with probability 0.5.
    pub flip: bool,
    /// Keep attention-stream weights fixed during joint training.
    pub freeze_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ifd,
            height: 64,
            width: 32,
            ikt_kernel: 7,
            phase1_epochs: 5,
            phase2_epochs: 20,
            lr: 3.5e-4,
            weight_decay: 5e-4,
            lr_milestones: vec![0.6, 0.8],
            lr_gamma: 0.1,
            seed: 0,
            flip: true,
            freeze_attention: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("train.height and train.width must be positive".into()));
        }
        if self.ikt_kernel % 2 == 0 {
            return Err(Error::Config(format!("train.ikt_kernel must be odd, got {}", self.ikt_kernel)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("train.lr_milestones must lie in [0, 1]".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::Config("train.lr_gamma must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate for joint-phase epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch as f64 >= (m * self.phase2_epochs as f64).round())
            .count();
        self.lr * self.lr_gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
}

fn to_value(cfg: &Config) -> Value {
    Value::try_from(cfg).expect("config serializes")
}

fn from_value(v: Value) -> Result<Config> {
    v.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses `text` as a value of the same TOML type as `current`.
fn typed_value(key: &str, current: &Value, text: &str) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("--set {key}: expected {what}, got '{text}'"));
    Ok(match current {
        Value::Integer(_) => Value::Integer(text.trim().parse().map_err(|_| bad("an integer"))?),
        Value::Float(_) => Value::Float(text.trim().parse().map_err(|_| bad("a number"))?),
        Value::Boolean(_) => Value::Boolean(text.trim().parse().map_err(|_| bad("true or false"))?),
        Value::String(_) => {
            let t = text.trim();
            let unquoted = t
                .strip_prefix('"')
                .and_then(|s| s.strip_suffix('"'))
                .unwrap_or(t);
            Value::String(unquoted.to_string())
        }
        Value::Array(_) => {
            let doc: toml::Table = format!("v = {text}").parse().map_err(|_| bad("an array"))?;
            match doc.get("v") {
                Some(v @ Value::Array(_)) => v.clone(),
                _ => return Err(bad("an array")),
            }
        }
        Value::Table(_) => return Err(Error::Config(format!("--set {key}: cannot replace a whole section"))),
        Value::Datetime(_) => return Err(bad("a datetime")),
    })
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let over: Value = text
            .parse::<toml::Table>()
            .map(Value::Table)
            .map_err(|e| Error::Config(e.message().to_string()))?;
        let mut v = to_value(&Config::default());
        merge(&mut v, over);
        let cfg = from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies one `section.key=value` override, type-checked against the current value.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, text) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not of the form key=value")))?;
        let key = key.trim();
        let mut root = to_value(self);
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown configuration key '{key}'")))?;
        }
        *slot = typed_value(key, slot, text)?;
        let cfg = from_value(root).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("--set {key}: {m}")),
            other => other,
        })?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.backbone.validate()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        self.data.vocabulary()?.validate()
    }

    /// Effective configuration as TOML, every key present.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short stable digest of the effective configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_spec(&self, variant: Variant, num_classes: usize) -> ModelSpec {
        ModelSpec {
            variant,
            backbone: self.backbone.clone(),
            input: (self.train.height, self.train.width),
            num_classes,
            ikt_kernel: self.train.ikt_kernel,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = Config::default();
        let back = Config::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(Config::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let cfg = Config::from_toml_str("[loss]\nT = 0.25\n").unwrap();
        assert_eq!(cfg.loss.divisor, 0.25);
        assert_eq!(cfg.loss.tau, 0.1);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml_str("[loss]\ntemperature = 0.1\n").is_err());
        assert!(Config::from_toml_str("[nope]\n").is_err());
        let mut cfg = Config::default();
        assert!(cfg.set("loss.temperature=1").is_err());
        assert!(cfg.set("loss=1").is_err());
    }

    #[test]
    fn overrides_are_type_checked() {
        let mut cfg = Config::default();
        cfg.set("loss.lambda=0.5").unwrap();
        cfg.set("sampler.P=8").unwrap();
        cfg.set("train.variant=cbd").unwrap();
        cfg.set("train.lr_milestones=[0.5]").unwrap();
        cfg.set("sampler.mode=pk").unwrap();
        assert_eq!(cfg.loss.lambda, 0.5);
        assert_eq!(cfg.sampler.identities, 8);
        assert_eq!(cfg.train.variant, Variant::Cbd);
        assert_eq!(cfg.train.lr_milestones, vec![0.5]);
        let before = cfg.clone();
        assert!(cfg.set("sampler.P=eight").is_err());
        assert!(cfg.set("train.variant=resnet").is_err());
        assert!(cfg.set("loss.tau=-1").is_err());
        assert!(cfg.set("nonsense").is_err());
        assert_eq!(cfg, before);
        assert_ne!(cfg.hash(), Config::default().hash());
    }

    #[test]
    fn step_schedule() {
        let t = TrainConfig {
            phase2_epochs: 10,
            lr: 1.0,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..10).map(|e| t.lr_at(e)).collect();
        assert_eq!(lrs[5], 1.0);
        assert!((lrs[6] - 0.1).abs() < 1e-12);
        assert!((lrs[8] - 0.01).abs() < 1e-12);
    }
}
