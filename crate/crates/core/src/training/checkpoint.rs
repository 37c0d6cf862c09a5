//! Binary checkpoints: `STHCK1`, a u64 LE header length, a JSON header
//! describing every array, then the arrays as little-endian f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimState, OptimizerKind, TrainConfig};
use crate::data::{write_atomic, SplitSpec};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"STHCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to restore a trained model and resume its optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub split: Option<SplitSpec>,
    pub params: ParamStore<f32>,
    pub optim: Option<OptimState<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    split: Option<SplitSpec>,
    optimizer: Option<OptimHeader>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimHeader {
    kind: OptimizerKind,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    /// `param/<name>`, `first/<name>` or `second/<name>`
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in f32 elements.
    offset: usize,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    /// Checkpoint of `model`'s current parameters without optimizer state.
    pub fn from_model(model: &Model<f32>) -> Self {
        let mut params = model.params().clone();
        params.zero_grad();
        Self { model: model.config().clone(), train: None, split: None, params, optim: None }
    }

    /// Rebuilds the model; fails if the parameters do not fit the config.
    pub fn to_model(&self) -> Result<Model<f32>> {
        Model::with_params(self.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut data: Vec<f32> = Vec::new();
        let mut push = |prefix: &str, name: &str, t: &Tensor<f32>| {
            arrays.push(ArrayEntry { name: format!("{prefix}/{name}"), shape: t.shape().to_vec(), offset: data.len() });
            data.extend_from_slice(t.data());
        };
        for (name, p) in self.params.iter() {
            push("param", name, &p.value);
        }
        if let Some(st) = &self.optim {
            for (name, t) in &st.first {
                push("first", name, t);
            }
            for (name, t) in &st.second {
                push("second", name, t);
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            split: self.split.clone(),
            optimizer: self.optim.as_ref().map(|s| OptimHeader { kind: s.kind, step: s.step }),
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + 4 * data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| format_err("not a checkpoint (bad magic)"))?;
        if rest.len() < 8 {
            return Err(format_err("truncated checkpoint header"));
        }
        let header_len = u64::from_le_bytes(rest[..8].try_into().unwrap());
        let rest = &rest[8..];
        let header_len = usize::try_from(header_len).ok().filter(|&n| n <= rest.len());
        let Some(header_len) = header_len else {
            return Err(format_err("checkpoint header length exceeds the file"));
        };
        let header: Header =
            serde_json::from_slice(&rest[..header_len]).map_err(|e| format_err(format!("checkpoint header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {}", header.version)));
        }
        let raw = &rest[header_len..];
        if raw.len() % 4 != 0 {
            return Err(format_err("checkpoint data is not a whole number of f32 values"));
        }
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

        let mut params = ParamStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        let mut expected_offset = 0;
        for a in header.arrays {
            let len: usize = a.shape.iter().product();
            if a.offset != expected_offset || a.offset + len > data.len() {
                return Err(format_err(format!("array {} has an inconsistent offset", a.name)));
            }
            expected_offset += len;
            let t = Tensor::new(&a.shape, data[a.offset..a.offset + len].to_vec())
                .map_err(|e| format_err(format!("array {}: {e}", a.name)))?;
            let (kind, name) =
                a.name.split_once('/').ok_or_else(|| format_err(format!("bad array name {}", a.name)))?;
            match kind {
                "param" => params.insert(name, t).map_err(|e| format_err(e.to_string()))?,
                "first" => drop(first.insert(name.to_string(), t)),
                "second" => drop(second.insert(name.to_string(), t)),
                _ => return Err(format_err(format!("bad array name {}", a.name))),
            }
        }
        if expected_offset != data.len() {
            return Err(format_err("trailing data after the last array"));
        }
        let optim = match header.optimizer {
            Some(o) => {
                let shapes_match = |m: &BTreeMap<String, Tensor<f32>>| {
                    m.len() == params.len()
                        && m.iter().all(|(n, t)| params.value(n).is_ok_and(|p| p.shape() == t.shape()))
                };
                let second_ok = match o.kind {
                    OptimizerKind::Adam => shapes_match(&second),
                    OptimizerKind::SgdMomentum => second.is_empty(),
                };
                if !shapes_match(&first) || !second_ok {
                    return Err(format_err("optimizer buffers do not mirror the parameters"));
                }
                Some(OptimState { kind: o.kind, step: o.step, first, second })
            }
            None if first.is_empty() && second.is_empty() => None,
            None => return Err(format_err("optimizer buffers without optimizer metadata")),
        };
        Ok(Self { model: header.model, train: header.train, split: header.split, params, optim })
    }

    /// Atomic write (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
