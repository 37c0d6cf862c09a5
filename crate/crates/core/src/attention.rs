//! Scaled dot-product attention, multi-head attention, sinusoidal positions,
//! the class token and the pre-norm Transformer encoder block.

use rand::Rng;

use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normalization epsilon inside encoder blocks.
pub const NORM_EPS: f64 = 1e-5;

/// `softmax(Q·Kᵀ/√d_k)·V`. Returns `(output, weights)`.
pub fn scaled_dot_attention<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (nq, dk) = g.value(q).dims2()?;
    let (nk, dk2) = g.value(k).dims2()?;
    let (nv, _) = g.value(v).dims2()?;
    if dk == 0 {
        return Err(contract_err!("attention with d_k = 0"));
    }
    if dk != dk2 {
        return Err(dim_err!("attention: Q is {nq}×{dk} but K is {nk}×{dk2}"));
    }
    if nk != nv {
        return Err(dim_err!("attention: {nk} keys but {nv} values"));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, S::one() / S::from_usize(dk).unwrap().sqrt());
    let weights = g.softmax_rows(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head self-attention with per-head projections
/// `{p}.head{i}.{wq,wk,wv}` (`d_model×d_k`) and output projection `{p}.wo`
/// (`H·d_k × d_model`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHead {
    pub prefix: String,
    pub d_model: usize,
    pub heads: usize,
}

impl MultiHead {
    pub fn new(prefix: impl Into<String>, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
            return Err(config_err!("{heads} heads do not divide d_model = {d_model}"));
        }
        Ok(Self { prefix: prefix.into(), d_model, heads })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn head_name(&self, head: usize, which: &str) -> String {
        format!("{}.head{head}.{which}", self.prefix)
    }

    pub fn out_name(&self) -> String {
        format!("{}.wo", self.prefix)
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (self.d_model as f64).sqrt();
        for h in 0..self.heads {
            for which in ["wq", "wk", "wv"] {
                store.insert(self.head_name(h, which), Tensor::uniform(&[self.d_model, self.d_head()], bound, rng))?;
            }
        }
        store.insert(self.out_name(), Tensor::uniform(&[self.d_model, self.d_model], bound, rng))?;
        Ok(())
    }

    /// Output plus the attention weights of every head, in head order.
    pub fn forward_with_weights<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.d_model {
            return Err(dim_err!("multi-head: input width {d}, d_model {}", self.d_model));
        }
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = g.param(store, &self.head_name(h, "wq"))?;
            let wk = g.param(store, &self.head_name(h, "wk"))?;
            let wv = g.param(store, &self.head_name(h, "wv"))?;
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let (o, w) = scaled_dot_attention(g, q, k, v)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let wo = g.param(store, &self.out_name())?;
        Ok((g.matmul(cat, wo)?, weights))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, x)?.0)
    }
}

/// Pre-norm block: `y = x + MHA(norm₁(x))`, `out = y + FFN(norm₂(y))` with
/// `FFN(u) = ELU(u·FF₁ + b₁)·FF₂ + b₂`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderBlock {
    pub prefix: String,
    pub d_model: usize,
    pub d_ff: usize,
    pub attn: MultiHead,
}

impl EncoderBlock {
    pub fn new(prefix: impl Into<String>, d_model: usize, heads: usize, d_ff: usize) -> Result<Self> {
        let prefix = prefix.into();
        if d_ff < d_model {
            return Err(config_err!("d_ff = {d_ff} must be at least d_model = {d_model}"));
        }
        let attn = MultiHead::new(format!("{prefix}.attn"), d_model, heads)?;
        Ok(Self { prefix, d_model, d_ff, attn })
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        let d = self.d_model;
        for n in ["norm1", "norm2"] {
            store.insert(self.name(&format!("{n}.gain")), Tensor::ones(&[d]))?;
            store.insert(self.name(&format!("{n}.offset")), Tensor::zeros(&[d]))?;
        }
        self.attn.init(store, rng)?;
        store.insert(self.name("ff1.w"), Tensor::uniform(&[d, self.d_ff], 1.0 / (d as f64).sqrt(), rng))?;
        store.insert(self.name("ff1.b"), Tensor::zeros(&[self.d_ff]))?;
        store.insert(self.name("ff2.w"), Tensor::uniform(&[self.d_ff, d], 1.0 / (self.d_ff as f64).sqrt(), rng))?;
        store.insert(self.name("ff2.b"), Tensor::zeros(&[d]))?;
        Ok(())
    }

    fn norm<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, which: &str, x: Var) -> Result<Var> {
        let gain = g.param(store, &self.name(&format!("{which}.gain")))?;
        let offset = g.param(store, &self.name(&format!("{which}.offset")))?;
        g.layer_norm(x, gain, offset, S::lit(NORM_EPS))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let n1 = self.norm(g, store, "norm1", x)?;
        let a = self.attn.forward(g, store, n1)?;
        let y = g.add(x, a)?;

        let n2 = self.norm(g, store, "norm2", y)?;
        let w1 = g.param(store, &self.name("ff1.w"))?;
        let b1 = g.param(store, &self.name("ff1.b"))?;
        let w2 = g.param(store, &self.name("ff2.w"))?;
        let b2 = g.param(store, &self.name("ff2.b"))?;
        let h = g.matmul(n2, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.activation(h, Activation::elu());
        let f = g.matmul(h, w2)?;
        let f = g.add_row(f, b2)?;
        g.add(y, f)
    }
}

/// A stack of encoder blocks named `{prefix}.{i}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new(prefix: &str, depth: usize, d_model: usize, heads: usize, d_ff: usize) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(format!("{prefix}.{i}"), d_model, heads, d_ff))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        self.blocks.iter().try_for_each(|b| b.init(store, rng))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        Ok(x)
    }
}

/// Fixed sinusoidal encodings for positions `0..=max_len`:
/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(p / 10000^(2i/d))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTable<S> {
    max_len: usize,
    table: Tensor<S>,
}

impl<S: Scalar> PositionalTable<S> {
    pub fn new(max_len: usize, d_model: usize) -> Self {
        let table = Tensor::from_fn(&[max_len + 1, d_model], |idx| {
            let (pos, dim) = (idx / d_model, idx % d_model);
            let pair = (dim / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            S::lit(if dim % 2 == 0 { angle.sin() } else { angle.cos() })
        });
        Self { max_len, table }
    }

    /// Largest sequence length (excluding the class token) this table covers.
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn d_model(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn row(&self, pos: usize) -> &[S] {
        self.table.row(pos)
    }

    /// Rows for positions `0..n`.
    pub fn rows(&self, n: usize) -> Tensor<S> {
        let d = self.d_model();
        Tensor::new(&[n, d], self.table.data()[..n * d].to_vec()).expect("positional rows")
    }
}

/// Name of the learned class-token parameter.
pub const CLS_NAME: &str = "cls";

/// Registers the zero-initialized class token.
pub fn init_cls<S: Scalar>(store: &mut ParamStore<S>, d_model: usize) -> Result<()> {
    store.insert(CLS_NAME, Tensor::zeros(&[d_model]))
}

/// Prepends the class token to an `N×d_model` sequence and adds the encoding
/// of position `i` to row `i`, giving `(N+1)×d_model`.
pub fn add_positions_and_cls<S: Scalar>(
    g: &mut Graph<S>,
    seq: Var,
    table: &PositionalTable<S>,
    cls: Var,
) -> Result<Var> {
    let (n, d) = g.value(seq).dims2()?;
    if n > table.max_len() {
        return Err(Error::Capacity(format!("sequence of {n} tokens exceeds positional capacity {}", table.max_len())));
    }
    if d != table.d_model() || g.value(cls).len() != d {
        return Err(dim_err!("tokens are {d} wide, table {} and class token {}", table.d_model(), g.value(cls).len()));
    }
    let cls_row = g.reshape(cls, &[1, d])?;
    let tokens = g.concat_rows(&[cls_row, seq])?;
    let pos = g.input(table.rows(n + 1));
    g.add(tokens, pos)
}
