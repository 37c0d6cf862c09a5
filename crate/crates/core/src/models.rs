//! End-to-end clip classifiers.
//!
//! * `hybrid`: shared CNN per frame, class token and sinusoidal positions
//!   over the frame features, Transformer encoder, linear head on the
//!   class-token output.
//! * `vit_only`: every frame cut into patches, patches of all frames
//!   concatenated in frame order and numbered globally, then the same
//!   encoder and head.
//! * `cnn_baseline`: shared CNN per frame, temporal mean, two-layer ELU MLP.
//! * `cnn_lstm`: shared CNN per frame, many-to-one LSTM, linear head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, Encoder, PositionalTable, CLS_NAME, NORM_EPS};
use crate::error::{config_err, contract_err, Result};
use crate::graph::{self, Activation, Graph, Var};
use crate::params::ParamStore;
use crate::recurrent::LstmCell;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vision::{self, FeatureExtractor, Frame, PatchEmbed, SmallCnn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Hybrid,
    VitOnly,
    CnnBaseline,
    CnnLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Hybrid, ModelKind::VitOnly, ModelKind::CnnBaseline, ModelKind::CnnLstm];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Hybrid => "hybrid",
            ModelKind::VitOnly => "vit_only",
            ModelKind::CnnBaseline => "cnn_baseline",
            ModelKind::CnnLstm => "cnn_lstm",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            config_err!("unknown model kind {s:?} (expected hybrid, vit_only, cnn_baseline or cnn_lstm)")
        })
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Full architecture description. Construction from it is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_classes: usize,
    /// Frames per clip fed to the model.
    pub context: usize,
    /// Context lengths accepted by validation.
    pub allowed_contexts: Vec<usize>,
    /// `[C, H, W]`
    pub frame_shape: [usize; 3],
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub d_ff: usize,
    /// CNN feature length; a projection to `d_model` is added when they differ.
    pub feature_len: usize,
    pub patch: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Hybrid,
            num_classes: 6,
            context: 24,
            allowed_contexts: vec![12, 18, 24],
            frame_shape: [1, 32, 32],
            d_model: 128,
            heads: 4,
            depth: 2,
            d_ff: 256,
            feature_len: 128,
            patch: 16,
            lstm_hidden: 128,
            mlp_hidden: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Checks every constraint before any parameter is allocated.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.context == 0 || !self.allowed_contexts.contains(&self.context) {
            return Err(config_err!("context length {} is not one of {:?}", self.context, self.allowed_contexts));
        }
        let [c, h, w] = self.frame_shape;
        if !(c == 1 || c == 3) || h < 8 || w < 8 {
            return Err(config_err!("frame shape {:?}: need C in {{1,3}} and H, W >= 8", self.frame_shape));
        }
        match self.kind {
            ModelKind::VitOnly => {
                if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
                    return Err(config_err!("patch size {} does not divide the {h}×{w} frame", self.patch));
                }
            }
            _ => {
                if h % 16 != 0 || w % 16 != 0 {
                    return Err(config_err!("frame {h}×{w} is not divisible by 16 (four 2× poolings)"));
                }
                if self.feature_len == 0 {
                    return Err(config_err!("feature_len must be positive"));
                }
            }
        }
        match self.kind {
            ModelKind::Hybrid | ModelKind::VitOnly => {
                if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
                    return Err(config_err!("{} heads do not divide d_model = {}", self.heads, self.d_model));
                }
                if self.depth == 0 {
                    return Err(config_err!("encoder depth must be at least 1"));
                }
                if self.d_ff < self.d_model {
                    return Err(config_err!("d_ff = {} must be at least d_model = {}", self.d_ff, self.d_model));
                }
            }
            ModelKind::CnnLstm if self.lstm_hidden == 0 => return Err(config_err!("lstm_hidden must be positive")),
            ModelKind::CnnBaseline if self.mlp_hidden == 0 => return Err(config_err!("mlp_hidden must be positive")),
            _ => {}
        }
        Ok(())
    }

    /// Tokens (excluding the class token) the encoder sees per clip.
    pub fn tokens(&self) -> usize {
        match self.kind {
            ModelKind::VitOnly => {
                let [_, h, w] = self.frame_shape;
                self.context * (h / self.patch) * (w / self.patch)
            }
            _ => self.context,
        }
    }
}

/// Probability vector over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(contract_err!("class distribution has invalid entries"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(contract_err!("class distribution sums to {total}"));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Arg-max; ties go to the lowest index.
pub fn predict(d: &ClassDistribution) -> usize {
    argmax(d.probs())
}

pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
enum Arch {
    Hybrid { cnn: SmallCnn, encoder: Encoder, project: bool },
    VitOnly { embed: PatchEmbed, encoder: Encoder },
    CnnBaseline { cnn: SmallCnn },
    CnnLstm { cnn: SmallCnn, lstm: LstmCell },
}

/// A configured classifier with its parameters.
#[derive(Clone, Debug)]
pub struct Model<S> {
    config: ModelConfig,
    arch: Arch,
    positions: Option<PositionalTable<S>>,
    params: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    /// Validates `config` and initializes parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let arch = Self::build_arch(&config)?;
        let positions = match config.kind {
            ModelKind::Hybrid | ModelKind::VitOnly => Some(PositionalTable::new(config.tokens(), config.d_model)),
            _ => None,
        };
        let mut model = Self { config, arch, positions, params: ParamStore::new() };
        let mut rng = rng::derived(model.config.seed, "model-init");
        model.init_params(&mut rng)?;
        Ok(model)
    }

    /// Replaces all parameters; names and shapes must match exactly.
    pub fn with_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        let mut m = Self::new(config)?;
        let mut expected: Vec<(&str, &[usize])> = m.params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        let mut got: Vec<(&str, &[usize])> = params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        expected.sort();
        got.sort();
        if expected != got {
            return Err(config_err!("parameter set does not match the model configuration"));
        }
        m.params = params;
        Ok(m)
    }

    fn build_arch(c: &ModelConfig) -> Result<Arch> {
        let cnn = || SmallCnn::new("cnn", c.frame_shape, c.feature_len);
        Ok(match c.kind {
            ModelKind::Hybrid => Arch::Hybrid {
                cnn: cnn()?,
                encoder: Encoder::new("encoder", c.depth, c.d_model, c.heads, c.d_ff)?,
                project: c.feature_len != c.d_model,
            },
            ModelKind::VitOnly => Arch::VitOnly {
                embed: PatchEmbed::new("patch", c.patch, c.frame_shape[0], c.d_model),
                encoder: Encoder::new("encoder", c.depth, c.d_model, c.heads, c.d_ff)?,
            },
            ModelKind::CnnBaseline => Arch::CnnBaseline { cnn: cnn()? },
            ModelKind::CnnLstm => {
                Arch::CnnLstm { cnn: cnn()?, lstm: LstmCell::new("lstm", c.lstm_hidden, c.feature_len) }
            }
        })
    }

    fn init_params<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let c = self.config.clone();
        let store = &mut self.params;
        let linear =
            |store: &mut ParamStore<S>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R| -> Result<()> {
                store.insert(
                    format!("{name}.w"),
                    Tensor::uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
                )?;
                store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))
            };
        match &self.arch {
            Arch::Hybrid { cnn, encoder, project } => {
                cnn.init(store, rng)?;
                if *project {
                    linear(store, "proj", c.feature_len, c.d_model, rng)?;
                }
                attention::init_cls(store, c.d_model)?;
                encoder.init(store, rng)?;
                Self::init_transformer_head(store, &c, rng)?;
            }
            Arch::VitOnly { embed, encoder } => {
                embed.init(store, rng)?;
                attention::init_cls(store, c.d_model)?;
                encoder.init(store, rng)?;
                Self::init_transformer_head(store, &c, rng)?;
            }
            Arch::CnnBaseline { cnn } => {
                cnn.init(store, rng)?;
                linear(store, "head.hidden", c.feature_len, c.mlp_hidden, rng)?;
                linear(store, "head.out", c.mlp_hidden, c.num_classes, rng)?;
            }
            Arch::CnnLstm { cnn, lstm } => {
                cnn.init(store, rng)?;
                lstm.init(store, rng)?;
                linear(store, "head", c.lstm_hidden, c.num_classes, rng)?;
            }
        }
        Ok(())
    }

    fn init_transformer_head<R: Rng + ?Sized>(store: &mut ParamStore<S>, c: &ModelConfig, rng: &mut R) -> Result<()> {
        store.insert("head.norm.gain", Tensor::ones(&[c.d_model]))?;
        store.insert("head.norm.offset", Tensor::zeros(&[c.d_model]))?;
        store.insert("head.w", Tensor::uniform(&[c.d_model, c.num_classes], 1.0 / (c.d_model as f64).sqrt(), rng))?;
        store.insert("head.b", Tensor::zeros(&[c.num_classes]))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<S> {
        self.params
    }

    /// Same architecture in another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            arch: self.arch.clone(),
            positions: self.positions.as_ref().map(|_| PositionalTable::new(self.config.tokens(), self.config.d_model)),
            params: self.params.cast(),
        }
    }

    fn check_clip(&self, clip: &[Frame<S>]) -> Result<()> {
        if clip.len() != self.config.context {
            return Err(contract_err!("clip has {} frames, model expects {}", clip.len(), self.config.context));
        }
        Ok(())
    }

    /// Builds the forward graph and returns the `1×num_classes` logits,
    /// reading parameters from `store` (normally [`Model::params`]).
    pub fn forward_logits(&self, g: &mut Graph<S>, store: &ParamStore<S>, clip: &[Frame<S>]) -> Result<Var> {
        self.check_clip(clip)?;
        match &self.arch {
            Arch::Hybrid { cnn, encoder, project } => {
                let mut feats = vision::time_distributed(g, store, cnn, clip)?;
                if *project {
                    feats = linear(g, store, "proj", feats)?;
                }
                self.transformer_tail(g, store, encoder, feats)
            }
            Arch::VitOnly { embed, encoder } => {
                let mut rows = Vec::new();
                let mut n = 0;
                for f in clip {
                    let p = vision::patchify(f.tensor(), self.config.patch)?;
                    n += p.shape()[0];
                    rows.extend_from_slice(p.data());
                }
                let patches = g.input(Tensor::new(&[n, embed.patch_len()], rows)?);
                let tokens = embed.forward(g, store, patches)?;
                self.transformer_tail(g, store, encoder, tokens)
            }
            Arch::CnnBaseline { cnn } => {
                let feats = vision::time_distributed(g, store, cnn, clip)?;
                let pooled = g.mean_rows(feats)?;
                let h = linear(g, store, "head.hidden", pooled)?;
                let h = g.activation(h, Activation::elu());
                linear(g, store, "head.out", h)
            }
            Arch::CnnLstm { cnn, lstm } => {
                let feats = vision::time_distributed(g, store, cnn, clip)?;
                let xs = (0..clip.len()).map(|t| g.slice_rows(feats, t, 1)).collect::<Result<Vec<_>>>()?;
                let rec = crate::recurrent::Recurrent::Lstm(lstm.clone());
                let h = rec.run_many_to_one(g, store, &xs, None, None)?;
                let h = g.reshape(h, &[1, lstm.hidden])?;
                linear(g, store, "head", h)
            }
        }
    }

    fn transformer_tail(&self, g: &mut Graph<S>, store: &ParamStore<S>, encoder: &Encoder, tokens: Var) -> Result<Var> {
        let table = self.positions.as_ref().expect("transformer models carry a positional table");
        let cls = g.param(store, CLS_NAME)?;
        let x = attention::add_positions_and_cls(g, tokens, table, cls)?;
        let y = encoder.forward(g, store, x)?;
        let z = g.slice_rows(y, 0, 1)?;
        let gain = g.param(store, "head.norm.gain")?;
        let offset = g.param(store, "head.norm.offset")?;
        let z = g.layer_norm(z, gain, offset, S::lit(NORM_EPS))?;
        linear(g, store, "head", z)
    }

    /// Logits for one clip using the model's own parameters.
    pub fn logits(&self, clip: &[Frame<S>]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let l = self.forward_logits(&mut g, &self.params, clip)?;
        Ok(g.value(l).clone())
    }

    /// Softmax over the logits.
    pub fn forward(&self, clip: &[Frame<S>]) -> Result<ClassDistribution> {
        let p = graph::softmax_rows(&self.logits(clip)?)?;
        ClassDistribution::new(p.data().iter().map(|v| v.as_f64()).collect())
    }
}

fn linear<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}
