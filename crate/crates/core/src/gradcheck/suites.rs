//! The three gradient-check levels shared by the CLI and the tests.

use std::str::FromStr;

use rand::Rng;

use super::{check_inputs, check_params, random_away_from_zero, CheckReport, Coverage};
use crate::attention::{self, Encoder, EncoderBlock, MultiHead};
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{Model, ModelConfig, ModelKind};
use crate::params::ParamStore;
use crate::recurrent::{CellKind, GruCell, LstmCell, Recurrent, RnnCell};
use crate::rng::{self, Rng as ChaCha};
use crate::tensor::Tensor;
use crate::training::cross_entropy_loss;
use crate::vision::{FeatureExtractor, Frame, PatchEmbed, SmallCnn};

pub const OP_TOL: f64 = 1e-6;
pub const CELL_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;

/// Entries perturbed per parameter tensor in the model-level checks.
const MODEL_SAMPLES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Ops,
    Cells,
    Models,
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Level::Ops),
            "cells" => Ok(Level::Cells),
            "models" => Ok(Level::Models),
            _ => Err(config_err!("unknown gradcheck level {s:?} (expected ops, cells or models)")),
        }
    }
}

/// Runs every check of one level.
pub fn run_suite(level: Level, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = rng::derived(seed, "gradcheck");
    match level {
        Level::Ops => ops(&mut rng),
        Level::Cells => cells(&mut rng),
        Level::Models => models(&mut rng, seed),
    }
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output entry matters.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.input(random_away_from_zero(&shape, &mut rng::seeded(seed)));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn rand(shape: &[usize], rng: &mut ChaCha) -> Tensor<f64> {
    random_away_from_zero(shape, rng)
}

fn ops(rng: &mut ChaCha) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let mut op =
        |name: &str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>| -> Result<()> {
            out.push(check_inputs(name, &inputs, OP_TOL, |g, v| {
                let y = f(g, v)?;
                project(g, y, 17)
            })?);
            Ok(())
        };

    op("matmul", vec![rand(&[3, 4], rng), rand(&[4, 2], rng)], &|g, v| g.matmul(v[0], v[1]))?;
    op("add", vec![rand(&[2, 3], rng), rand(&[2, 3], rng)], &|g, v| g.add(v[0], v[1]))?;
    op("sub", vec![rand(&[2, 3], rng), rand(&[2, 3], rng)], &|g, v| g.sub(v[0], v[1]))?;
    op("mul", vec![rand(&[2, 3], rng), rand(&[2, 3], rng)], &|g, v| g.mul(v[0], v[1]))?;
    op("add_row", vec![rand(&[3, 4], rng), rand(&[4], rng)], &|g, v| g.add_row(v[0], v[1]))?;
    op("affine", vec![rand(&[2, 3], rng)], &|g, v| Ok(g.affine(v[0], -1.5, 0.25)))?;
    op("tanh", vec![rand(&[2, 3], rng)], &|g, v| Ok(g.tanh(v[0])))?;
    op("sigmoid", vec![rand(&[2, 3], rng)], &|g, v| Ok(g.sigmoid(v[0])))?;
    op("relu", vec![rand(&[2, 3], rng)], &|g, v| Ok(g.relu(v[0])))?;
    op("elu", vec![rand(&[2, 3], rng)], &|g, v| Ok(g.elu(v[0])))?;
    op("softmax_rows", vec![rand(&[3, 4], rng)], &|g, v| g.softmax_rows(v[0]))?;
    op("conv2d", vec![rand(&[2, 5, 5], rng), rand(&[3, 2, 3, 3], rng)], &|g, v| g.conv2d(v[0], v[1], 1, 1))?;
    op("conv2d_batched_strided", vec![rand(&[2, 2, 6, 6], rng), rand(&[3, 2, 2, 2], rng)], &|g, v| {
        g.conv2d(v[0], v[1], 2, 0)
    })?;
    op("channel_bias", vec![rand(&[3, 2, 2], rng), rand(&[3], rng)], &|g, v| g.add_channel_bias(v[0], v[1]))?;
    op("max_pool2", vec![rand(&[2, 4, 4], rng)], &|g, v| g.max_pool2(v[0]))?;
    op("reshape_transpose", vec![rand(&[2, 6], rng)], &|g, v| {
        let r = g.reshape(v[0], &[3, 4])?;
        g.transpose(r)
    })?;
    op("slice_concat", vec![rand(&[4, 3], rng), rand(&[4, 2], rng)], &|g, v| {
        let a = g.slice_rows(v[0], 1, 2)?;
        let b = g.slice_rows(v[0], 0, 1)?;
        let rows = g.concat_rows(&[a, b])?;
        let c = g.slice_rows(v[1], 0, 3)?;
        g.concat_cols(&[rows, c])
    })?;
    op("mean_rows", vec![rand(&[4, 3], rng)], &|g, v| g.mean_rows(v[0]))?;
    op("layer_norm", vec![rand(&[3, 5], rng), rand(&[5], rng), rand(&[5], rng)], &|g, v| {
        g.layer_norm(v[0], v[1], v[2], attention::NORM_EPS)
    })?;
    op("cross_entropy", vec![rand(&[1, 5], rng)], &|g, v| cross_entropy_loss(g, v[0], 3))?;
    op("scaled_dot_attention", vec![rand(&[3, 4], rng), rand(&[5, 4], rng), rand(&[5, 2], rng)], &|g, v| {
        Ok(attention::scaled_dot_attention(g, v[0], v[1], v[2])?.0)
    })?;
    Ok(out)
}

fn cells(rng: &mut ChaCha) -> Result<Vec<CheckReport>> {
    let (nh, nx) = (3, 4);
    let mut out = Vec::new();
    for kind in [CellKind::Vanilla, CellKind::Lstm, CellKind::Gru] {
        let cell = Recurrent::new(kind, "cell", nh, nx);
        let mut store = ParamStore::new();
        cell.init(&mut store, rng)?;
        let state = [rand(&[nh, 1], rng), rand(&[nh, 1], rng), rand(&[nx, 1], rng)];
        let step = |g: &mut Graph<f64>, store: &ParamStore<f64>, h: Var, c: Var, x: Var| -> Result<Var> {
            let (h, c) = match &cell {
                Recurrent::Vanilla(r) => (step_rnn(r, g, store, h, x)?, None),
                Recurrent::Lstm(l) => {
                    let s = step_lstm(l, g, store, h, c, x)?;
                    (s.0, Some(s.1))
                }
                Recurrent::Gru(r) => (step_gru(r, g, store, h, x)?, None),
            };
            let ph = project(g, h, 3)?;
            match c {
                Some(c) => {
                    let pc = project(g, c, 4)?;
                    g.add(ph, pc)
                }
                None => Ok(ph),
            }
        };
        let name = format!("{kind:?}").to_lowercase();
        out.push(check_params(&format!("{name}_step_params"), &store, Coverage::All, CELL_TOL, |g, s| {
            let v: Vec<Var> = state.iter().map(|t| g.input(t.clone())).collect();
            step(g, s, v[0], v[1], v[2])
        })?);
        out.push(check_inputs(&format!("{name}_step_inputs"), &state, CELL_TOL, |g, v| {
            step(g, &store, v[0], v[1], v[2])
        })?);

        let xs: Vec<Tensor<f64>> = (0..5).map(|_| rand(&[1, nx], rng)).collect();
        out.push(check_params(&format!("{name}_many_to_one"), &store, Coverage::All, CELL_TOL, |g, s| {
            let vs: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
            let h = cell.run_many_to_one(g, s, &vs, None, None)?;
            project(g, h, 5)
        })?);
    }
    Ok(out)
}

fn step_rnn(c: &RnnCell, g: &mut Graph<f64>, s: &ParamStore<f64>, h: Var, x: Var) -> Result<Var> {
    c.step(g, s, h, x)
}

fn step_lstm(c: &LstmCell, g: &mut Graph<f64>, s: &ParamStore<f64>, h: Var, cs: Var, x: Var) -> Result<(Var, Var)> {
    let st = c.step(g, s, h, cs, x)?;
    Ok((st.h, st.c))
}

fn step_gru(c: &GruCell, g: &mut Graph<f64>, s: &ParamStore<f64>, h: Var, x: Var) -> Result<Var> {
    Ok(c.step(g, s, h, x)?.h)
}

/// Tiny dimensions for the whole-model checks.
pub fn tiny_model_config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        num_classes: 3,
        context: 3,
        allowed_contexts: vec![3],
        frame_shape: [1, 16, 16],
        d_model: 8,
        heads: 2,
        depth: 1,
        d_ff: 16,
        feature_len: 8,
        patch: 8,
        lstm_hidden: 6,
        mlp_hidden: 6,
        seed: 0,
    }
}

/// Smallest top-two gap allowed in any pooling window of a model test
/// point; closer ties could flip under the finite-difference step.
const POOL_MARGIN: f64 = 1e-4;
/// Test points drawn before giving up on a clear pooling margin.
const MAX_DRAWS: usize = 500;

/// Redraws every parameter with magnitude bounded away from zero, so
/// zero-initialized tensors (biases, class token) leave their symmetric
/// points and few gradient entries fall into finite-difference round-off.
/// Attention projections get unit scale, which keeps the softmax away from
/// uniform; everything else is scaled by fan-in, which keeps gates and
/// activations unsaturated.
fn redraw(store: &mut ParamStore<f64>, rng: &mut ChaCha) {
    for (name, p) in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        let scale = match shape.as_slice() {
            [_, _] if name.contains("attn.") => 1.0,
            [r, c] => 1.0 / (*r.max(c) as f64).sqrt(),
            [_, c, kh, kw] => 1.0 / ((c * kh * kw) as f64).sqrt(),
            _ => 0.5,
        };
        p.value = random_away_from_zero(&shape, rng).map(|v| v * scale);
    }
}

fn random_clip(len: usize, rng: &mut ChaCha) -> Result<Vec<Frame<f64>>> {
    (0..len).map(|_| Frame::new(Tensor::from_fn(&[1, 16, 16], |_| rng.gen_range(0.0..1.0)))).collect()
}

/// Draws parameters and an input until every pooling window has a clear
/// winner under `forward`.
fn clear_of_pool_ties<T>(
    store: &mut ParamStore<f64>,
    rng: &mut ChaCha,
    mut draw: impl FnMut(&mut ChaCha) -> Result<T>,
    forward: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &T) -> Result<Var>,
) -> Result<T> {
    for _ in 0..MAX_DRAWS {
        redraw(store, rng);
        let input = draw(rng)?;
        let mut g = Graph::new();
        forward(&mut g, store, &input)?;
        if g.min_pool_margin().is_none_or(|m| m > POOL_MARGIN) {
            return Ok(input);
        }
    }
    Err(Error::Numeric(format!("no test point with pooling margin above {POOL_MARGIN} in {MAX_DRAWS} draws")))
}

fn models(rng: &mut ChaCha, seed: u64) -> Result<Vec<CheckReport>> {
    let coverage = Coverage::Sampled { per_tensor: MODEL_SAMPLES, seed };
    let mut out = Vec::new();

    // building blocks first
    let seq = rand(&[4, 8], rng);
    let mut store = ParamStore::new();
    let mha = MultiHead::new("mha", 8, 2)?;
    mha.init(&mut store, rng)?;
    out.push(check_params("multi_head_attention", &store, Coverage::All, MODEL_TOL, |g, s| {
        let x = g.input(seq.clone());
        let y = mha.forward(g, s, x)?;
        project(g, y, 6)
    })?);
    out.push(check_inputs("multi_head_attention_input", std::slice::from_ref(&seq), MODEL_TOL, |g, v| {
        let y = mha.forward(g, &store, v[0])?;
        project(g, y, 6)
    })?);

    let mut store = ParamStore::new();
    let block = EncoderBlock::new("block", 8, 2, 16)?;
    block.init(&mut store, rng)?;
    redraw(&mut store, rng);
    out.push(check_params("encoder_block", &store, Coverage::All, MODEL_TOL, |g, s| {
        let x = g.input(seq.clone());
        let y = block.forward(g, s, x)?;
        project(g, y, 7)
    })?);

    let mut store = ParamStore::new();
    let enc = Encoder::new("enc", 2, 8, 2, 16)?;
    enc.init(&mut store, rng)?;
    redraw(&mut store, rng);
    out.push(check_inputs("encoder_input", std::slice::from_ref(&seq), MODEL_TOL, |g, v| {
        let y = enc.forward(g, &store, v[0])?;
        project(g, y, 8)
    })?);

    let mut store = ParamStore::new();
    let cnn = SmallCnn::new("cnn", [1, 16, 16], 8)?;
    cnn.init(&mut store, rng)?;
    let frame = clear_of_pool_ties(
        &mut store,
        rng,
        |r| Ok(random_clip(1, r)?.remove(0)),
        |g, s, f| cnn.forward_frame(g, s, f),
    )?;
    out.push(check_params("small_cnn", &store, coverage, MODEL_TOL, |g, s| {
        let y = cnn.forward_frame(g, s, &frame)?;
        project(g, y, 9)
    })?);

    let mut store = ParamStore::new();
    let embed = PatchEmbed::new("patch", 4, 1, 8);
    embed.init(&mut store, rng)?;
    let patches = rand(&[16, 16], rng);
    out.push(check_params("patch_embed", &store, Coverage::All, MODEL_TOL, |g, s| {
        let p = g.input(patches.clone());
        let y = embed.forward(g, s, p)?;
        project(g, y, 10)
    })?);

    for kind in [ModelKind::Hybrid, ModelKind::VitOnly, ModelKind::CnnBaseline, ModelKind::CnnLstm] {
        let config = tiny_model_config(kind);
        let mut model = Model::<f64>::new(config.clone())?;
        let mut params = model.params().clone();
        let label = rng.gen_range(0..config.num_classes);
        let clip = clear_of_pool_ties(
            &mut params,
            rng,
            |r| random_clip(config.context, r),
            |g, s, c| model.forward_logits(g, s, c),
        )?;
        *model.params_mut() = params;
        out.push(check_params(&format!("model_{kind}"), model.params(), coverage, MODEL_TOL, |g, s| {
            let logits = model.forward_logits(g, s, &clip)?;
            cross_entropy_loss(g, logits, label)
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_parse() {
        assert_eq!("cells".parse::<Level>().unwrap(), Level::Cells);
        assert!("all".parse::<Level>().is_err());
    }

    #[test]
    fn ops_level_passes() {
        for r in run_suite(Level::Ops, 0).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn cells_level_passes() {
        for r in run_suite(Level::Cells, 0).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn models_level_passes() {
        let reports = run_suite(Level::Models, 0).unwrap();
        assert_eq!(reports.iter().filter(|r| r.name.starts_with("model_")).count(), 4);
        for r in reports {
            assert!(r.passed(), "{r:?}");
        }
    }
}
