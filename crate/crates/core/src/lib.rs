//! Spatio-temporal human action recognition from scratch.
//!
//! Dense tensors with reverse-mode differentiation, the classic recurrent
//! cells, scaled dot-product and multi-head attention, a Transformer encoder,
//! a small per-frame CNN, and four clip classifiers built from them: a hybrid
//! CNN + ViT, a patch-based ViT, a CNN with temporal mean pooling and a
//! CNN-LSTM. The [`data`] and [`training`] modules provide clip ingestion, a
//! synthetic action dataset, optimizers, checkpoints and evaluation.
//!
//! All numerical code is generic over [`Scalar`]; training uses `f32` and
//! gradient checks use `f64`.

pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod models;
pub mod params;
pub mod recurrent;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
pub use graph::{Activation, Gradients, Graph, Var};
pub use params::{Param, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
