//! Run configuration.
//!
//! On disk the configuration is a flat JSON object with dotted keys
//! (`"encoder.dim": 64`, `"train.alpha": 0.5`). Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Window,
    Recurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Hidden size `d`.
    pub dim: usize,
    /// Context words on each side for the window mixer.
    pub window: usize,
    /// Width of randomly initialized embeddings when no file is given.
    pub embed_dim: usize,
    /// Lowercase tokens before embedding lookup.
    pub lowercase: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Window,
            dim: 64,
            window: 1,
            embed_dim: 32,
            lowercase: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeEncoderKind {
    StructuredAttention,
    Gcn,
}

/// Which states the child context aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChildContext {
    /// `Σ_k P_ik · h_k`
    #[serde(rename = "h_k")]
    Children,
    /// `Σ_k P_ik · h_i`, a scalar multiple of the node's own state.
    #[serde(rename = "h_i")]
    SelfState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeEncoderConfig {
    pub kind: TreeEncoderKind,
    pub layers: usize,
    pub child_ctx: ChildContext,
}

impl Default for TreeEncoderConfig {
    fn default() -> Self {
        TreeEncoderConfig {
            kind: TreeEncoderKind::StructuredAttention,
            layers: 2,
            child_ctx: ChildContext::Children,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Keep only edges within `k` hops of the aspect; `None` keeps everything.
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    Accuracy,
    MacroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the root-refinement loss, in `(0, 1)`.
    pub alpha: f64,
    /// When false the root-refinement term is dropped entirely (the `α → 0`
    /// baseline).
    pub root_refinement: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub dropout: f64,
    pub early_stop: EarlyStop,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            root_refinement: true,
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 30,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dropout: 0.1,
            early_stop: EarlyStop::Accuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha out of range: {} not in (0, 1)", self.alpha)));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("train.max_epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("train.dropout must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dev_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dev_fraction: 0.1 }
    }
}

/// Everything needed to rebuild a model and reproduce a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub tree_encoder: TreeEncoderConfig,
    pub prune: PruneConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.dim == 0 || self.encoder.embed_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.tree_encoder.layers == 0 {
            return Err(Error::Config("tree_encoder.layers must be at least 1".into()));
        }
        if self.prune.k == Some(0) {
            return Err(Error::Config("prune.k must be at least 1".into()));
        }
        if !(self.data.dev_fraction > 0.0 && self.data.dev_fraction < 1.0) {
            return Err(Error::Config("data.dev_fraction must be in (0, 1)".into()));
        }
        self.train.validate()
    }

    /// Build from a flat dotted-key object.
    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let mut config = Config::default();
        for (key, value) in flat {
            config.set(key, value.clone())?;
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let value: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
        match value {
            Value::Object(map) => Config::from_flat(&map),
            _ => Err(Error::Config("config file must hold a JSON object".into())),
        }
    }

    /// Override one dotted key, e.g. `set("train.alpha", json!(0.3))`.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let mut tree = serde_json::to_value(&*self)?;
        let slot = tree
            .get_mut(section)
            .and_then(|s| s.as_object_mut())
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        if !slot.contains_key(field) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        slot.insert(field.to_string(), value);
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    /// Flat dotted-key form, keys in sorted order.
    pub fn to_flat(&self) -> Map<String, Value> {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut flat = Map::new();
        if let Value::Object(sections) = tree {
            for (section, fields) in sections {
                if let Value::Object(fields) = fields {
                    for (field, v) in fields {
                        flat.insert(format!("{section}.{field}"), v);
                    }
                }
            }
        }
        flat
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flat_round_trip() {
        let mut c = Config::default();
        c.set("train.alpha", json!(0.25)).unwrap();
        c.set("tree_encoder.child_ctx", json!("h_i")).unwrap();
        c.set("prune.k", json!(2)).unwrap();
        assert_eq!(Config::from_flat(&c.to_flat()).unwrap(), c);
        assert_eq!(c.tree_encoder.child_ctx, ChildContext::SelfState);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = Config::default();
        assert!(c.set("train.alpah", json!(0.1)).is_err());
        assert!(c.set("bogus", json!(1)).is_err());
        assert!(c.set("nosection.x", json!(1)).is_err());
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = Config::default();
        assert!(c.set("encoder.kind", json!("transformer")).is_err());
        c.set("train.alpha", json!(1.5)).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("alpha out of range"));
    }
}
