//! Experiment configuration (TOML) with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::spectral::SaliencyParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Channel width `C` after the stem.
    pub stem_channels: usize,
    /// Number of RWKV stages `N`.
    pub stages: usize,
    /// Number of fusion blocks `M`.
    pub fusion_blocks: usize,
    pub classes: usize,
    /// Text embedding width `D`.
    pub embedding_dim: usize,
    pub prompt_tokens: usize,
    /// Shared query/key width; 0 means `stem_channels`.
    pub attention_dim: usize,
    pub channel_hidden_ratio: usize,
    pub ffn_ratio: usize,
    pub shift_kernel: usize,
    /// Train the WKV decay and bonus vectors.
    pub learnable_decay: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            stem_channels: 64,
            stages: 5,
            fusion_blocks: 2,
            classes: 10,
            embedding_dim: 512,
            prompt_tokens: 4,
            attention_dim: 0,
            channel_hidden_ratio: 1,
            ffn_ratio: 4,
            shift_kernel: 3,
            learnable_decay: true,
        }
    }
}

impl ModelConfig {
    /// Total stride of the convolutional stem.
    pub const STEM_STRIDE: usize = 4;

    pub fn feature_side(&self) -> usize {
        self.image_size / Self::STEM_STRIDE
    }

    pub fn attention_width(&self) -> usize {
        if self.attention_dim == 0 {
            self.stem_channels
        } else {
            self.attention_dim
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub tau: f64,
    pub hard: bool,
    pub top_k: usize,
    /// Sample Gumbel noise while training; evaluation is always noise-free.
    pub train_noise: bool,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            hard: true,
            top_k: 1,
            train_noise: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop once training accuracy reaches this value; 0 disables.
    pub early_stop_accuracy: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            schedule: Schedule::Constant,
            grad_clip: 0.0,
            early_stop_accuracy: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub conv_only_backbone: bool,
    pub disable_partition: bool,
    pub disable_fusion: bool,
    pub disable_prompt: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionMode {
    PerImage,
    PerClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub ratio: [usize; 3],
    pub split_seed: u64,
    pub captions: CaptionMode,
    /// PVLE embedding store; the mock encoder is used when unset.
    pub embeddings: Option<PathBuf>,
    pub caption_file: Option<PathBuf>,
    pub horizontal_flip: bool,
    pub weighted_precision: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            manifest: None,
            ratio: [7, 1, 2],
            split_seed: 0,
            captions: CaptionMode::PerImage,
            embeddings: None,
            caption_file: None,
            horizontal_flip: false,
            weighted_precision: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub partition: PartitionConfig,
    pub saliency: SaliencyParams,
    pub optimizer: OptimizerConfig,
    pub ablation: AblationConfig,
    pub data: DataConfig,
}

fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Loads `path` (or the defaults) and applies `key=value` overrides.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut value: toml::Value = if text.trim().is_empty() {
            toml::Value::Table(Default::default())
        } else {
            toml::from_str(&text).map_err(|e| invalid(e.to_string()))?
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Config = value.try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Canonical JSON, used inside checkpoints.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let unit = 4 * ModelConfig::STEM_STRIDE;
        if m.image_size == 0 || m.image_size % unit != 0 {
            return Err(invalid(format!("model.image_size {} must be a positive multiple of {unit}", m.image_size)));
        }
        for (name, v) in [
            ("model.stem_channels", m.stem_channels),
            ("model.classes", m.classes),
            ("model.embedding_dim", m.embedding_dim),
            ("model.channel_hidden_ratio", m.channel_hidden_ratio),
            ("model.ffn_ratio", m.ffn_ratio),
            ("optimizer.batch_size", self.optimizer.batch_size),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if m.stem_channels % 2 != 0 {
            return Err(invalid("model.stem_channels must be even"));
        }
        if m.shift_kernel % 2 == 0 {
            return Err(invalid("model.shift_kernel must be odd"));
        }
        let p = &self.partition;
        if !(p.tau > 0.0) {
            return Err(invalid("partition.tau must be positive"));
        }
        if p.top_k == 0 || p.top_k > 4 {
            return Err(invalid("partition.top_k must be in 1..=4"));
        }
        let s = &self.saliency;
        if !(s.epsilon > 0.0) {
            return Err(invalid("saliency.epsilon must be positive"));
        }
        if s.kernel % 2 == 0 || s.kernel > self.model.image_size {
            return Err(invalid("saliency.kernel must be odd and at most the image side"));
        }
        if s.sigma < 0.0 {
            return Err(invalid("saliency.sigma must be nonnegative"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 || o.grad_clip < 0.0 {
            return Err(invalid("optimizer: lr > 0, 0 <= momentum < 1, weight_decay >= 0, grad_clip >= 0"));
        }
        if self.data.ratio.iter().sum::<usize>() == 0 {
            return Err(invalid("data.ratio must not be all zero"));
        }
        Ok(())
    }

    /// Reduced-width configuration used for synthetic smoke runs.
    pub fn toy() -> Self {
        let mut cfg = Config::default();
        cfg.model.image_size = 32;
        cfg.model.stem_channels = 16;
        cfg.model.classes = 8;
        cfg.model.embedding_dim = 32;
        cfg.optimizer.batch_size = 8;
        // Plain SGD at lr 0.1 occasionally saturates the fusion attention on
        // the first steps; a norm clip keeps every seed trainable.
        cfg.optimizer.grad_clip = 2.0;
        cfg
    }
}

/// Keys whose default is unset and therefore absent from the serialized defaults.
const OPTIONAL_KEYS: [&str; 4] = ["data.root", "data.manifest", "data.embeddings", "data.caption_file"];

fn parse_scalar(raw: &str) -> toml::Value {
    // Reuse the TOML value grammar; anything unparseable is taken as a bare string.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `section.key = value` inside a TOML document. Only keys that exist in
/// [`Config`] are accepted.
pub fn apply_override(doc: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override {assignment:?} is not key=value")))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(invalid(format!("bad override key {path:?}")));
    }
    let known = toml::Value::try_from(Config::default()).expect("serializes");
    let mut probe = Some(&known);
    for k in &keys {
        probe = probe.and_then(|v| v.get(k));
    }
    if probe.is_none() && !OPTIONAL_KEYS.contains(&path) {
        return Err(invalid(format!("unknown config key {path}")));
    }
    let mut cursor = doc;
    for k in &keys[..keys.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| invalid(format!("{path}: parent is not a table")))?;
        cursor = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| invalid(format!("{path}: parent is not a table")))?;
    table.insert(keys[keys.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = Config::default();
        assert_eq!(cfg.model.image_size, 224);
        assert_eq!((cfg.model.stages, cfg.model.fusion_blocks), (5, 2));
        assert_eq!(cfg.optimizer.lr, 0.1);
        assert_eq!(cfg.data.ratio, [7, 1, 2]);
        cfg.validate().unwrap();
        Config::toy().validate().unwrap();
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg = Config::load_with_overrides(
            None,
            &["optimizer.epochs=1".into(), "ablation.disable_fusion=true".into(), "optimizer.schedule=cosine".into()],
        )
        .unwrap();
        assert_eq!(cfg.optimizer.epochs, 1);
        assert!(cfg.ablation.disable_fusion);
        assert_eq!(cfg.optimizer.schedule, Schedule::Cosine);
        assert!(Config::load_with_overrides(None, &["optimizer.epoch=1".into()]).is_err());
        assert!(Config::load_with_overrides(None, &["nokey".into()]).is_err());
        let cfg = Config::load_with_overrides(None, &["data.root=/tmp/x".into()]).unwrap();
        assert_eq!(cfg.data.root, Some(PathBuf::from("/tmp/x")));
        assert!(Config::load_with_overrides(None, &["model.image_size=30".into()]).is_err());
    }

    #[test]
    fn unknown_file_keys_fail() {
        assert!(Config::from_toml_str("[model]\nwidth = 3\n").is_err());
        assert!(Config::from_toml_str("[mdl]\n").is_err());
        let cfg = Config::from_toml_str("[model]\nimage_size = 32\n").unwrap();
        assert_eq!(cfg.model.image_size, 32);
    }

    #[test]
    fn toml_and_json_round_trip() {
        let cfg = Config::toy();
        assert_eq!(Config::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        assert_eq!(Config::from_json(&cfg.to_canonical_json()).unwrap(), cfg);
    }
}
