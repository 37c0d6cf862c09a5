//! Run configuration: one JSON file, dotted-path overrides, full validation
//! before anything touches data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sthar::data::{
    load_dataset, split_by_subject, synth_generate, DatasetManifest, SplitSpec, SyntheticSpec, SYNTH_CLASSES,
};
use sthar::models::ModelConfig;
use sthar::training::TrainConfig;
use sthar::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; when absent the synthetic generator is used.
    pub root: Option<PathBuf>,
    pub synth: SyntheticSpec,
    /// Train / val / test fractions of the subjects.
    pub split: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, synth: SyntheticSpec::default(), split: [0.6, 0.2, 0.2], split_seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides. Values parse as JSON, falling back to a plain string.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let base: RunConfig = match path {
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if sets.is_empty() {
            return Ok(base);
        }
        let mut tree = serde_json::to_value(&base)?;
        for s in sets {
            let (key, raw) = s.split_once('=').ok_or_else(|| config(format!("override {s:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key, value)?;
        }
        serde_json::from_value(tree).map_err(|e| config(format!("after overrides: {e}")))
    }

    /// Everything that can be checked without reading a single frame.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let r = self.data.split;
        if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config(format!("split fractions {r:?} must be non-negative and sum to 1")));
        }
        if r[0] == 0.0 {
            return Err(config("the train split fraction must be positive"));
        }
        if self.data.root.is_none() {
            let s = &self.data.synth;
            s.validate()?;
            if s.frame_shape != self.model.frame_shape {
                return Err(config(format!(
                    "synthetic frames {:?} do not match model.frame_shape {:?}",
                    s.frame_shape, self.model.frame_shape
                )));
            }
            if self.model.num_classes != SYNTH_CLASSES.len() {
                return Err(config(format!("the synthetic dataset has {} classes", SYNTH_CLASSES.len())));
            }
            if self.model.context > s.clip_length {
                return Err(config(format!(
                    "context {} exceeds the synthetic clip length {}",
                    self.model.context, s.clip_length
                )));
            }
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<(DatasetManifest, SplitSpec)> {
        let manifest = match &self.data.root {
            Some(root) => load_dataset(root)?,
            None => synth_generate(&self.data.synth)?,
        };
        let split = split_by_subject(&manifest, self.data.split, self.data.split_seed)?;
        Ok((manifest, split))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Replaces the value at a dotted path; every segment must already exist so
/// typos fail loudly instead of being ignored.
fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj =
            node.as_object_mut().ok_or_else(|| config(format!("{key}: {} is not an object", parts[..i].join("."))))?;
        let child = obj.get_mut(*part).ok_or_else(|| config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    unreachable!("split always yields at least one part")
}
