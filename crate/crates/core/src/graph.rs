//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value, so node indices are already a topological
//! order: backward walks them from the loss towards index 0 and visits every
//! node once. Parameters enter the graph through [`Graph::param`], which
//! copies the current value out of a [`ParamStore`] and remembers the
//! binding so gradients can be accumulated back into the store.

use std::collections::HashMap;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::ParamStore;
use crate::scalar::{self, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Elu(f64),
}

impl Activation {
    pub fn elu() -> Self {
        Activation::Elu(1.0)
    }

    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => scalar::sigmoid(x),
            Activation::Relu => x.max(S::zero()),
            Activation::Elu(a) => scalar::elu(x, S::lit(a)),
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            Activation::Tanh => S::one() - y * y,
            Activation::Sigmoid => y * (S::one() - y),
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Elu(a) => {
                if x > S::zero() {
                    S::one()
                } else {
                    y + S::lit(a)
                }
            }
        }
    }
}

enum Op<S> {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, S),
    Act(Var, Activation),
    SoftmaxRows(Var),
    Conv2d { input: Var, kernels: Var, geom: ConvGeom, images: usize, cols: Vec<S> },
    ChannelBias { input: Var, bias: Var, channels: usize, plane: usize },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    SliceRows { input: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    LayerNorm { input: Var, gain: Var, offset: Var, xhat: Vec<S>, inv_std: Vec<S> },
    NegLogPick { input: Var, index: usize, clamp: S },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    bound: HashMap<String, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<S: Scalar>(what: &str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims<S: Scalar>(what: &str, t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(dim_err!("{what}: expected a matrix, got shape {s:?}")),
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize) -> &mut Vec<S> {
    slot.get_or_insert_with(|| vec![S::zero(); len])
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Adds a constant (non-parameter) leaf.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Input)
    }

    /// Binds a parameter from `store`. Binding the same name twice returns
    /// the same node.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul lhs", ta)?;
        let (k2, n) = matrix_dims("matmul rhs", tb)?;
        if k != k2 {
            return Err(dim_err!("matmul: {:?} x {:?}", ta.shape(), tb.shape()));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn zip_with(&mut self, what: &str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(what, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (m, n) = matrix_dims("add_row", tx)?;
        if tr.len() != n {
            return Err(dim_err!("add_row: {:?} + row {:?}", tx.shape(), tr.shape()));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for (d, &b) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *d += b;
            }
        }
        let t = Tensor::new(&[m, n], data)?;
        Ok(self.push(t, Op::AddRow(x, row)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        self.push(t, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        self.affine(x, s, S::zero())
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x).map(|v| kind.apply(v));
        self.push(t, Op::Act(x, kind))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::elu())
    }

    /// Row-wise softmax with max subtraction. A rank-1 input is one row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = softmax_rows(self.value(x))?;
        Ok(self.push(t, Op::SoftmaxRows(x)))
    }

    /// Cross-correlation of `N×C×H×W` (or `C×H×W`) input with `K×C×kh×kw`
    /// kernels. The output keeps the input's rank.
    pub fn conv2d(&mut self, input: Var, kernels_var: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernels_var));
        let (images, c, h, w) = match ti.shape() {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(dim_err!("conv2d: input must be C×H×W or N×C×H×W, got {s:?}")),
        };
        let (k, kc, kh, kw) = match tk.shape() {
            [k, kc, kh, kw] => (*k, *kc, *kh, *kw),
            s => return Err(dim_err!("conv2d: kernels must be K×C×kh×kw, got {s:?}")),
        };
        if kc != c {
            return Err(dim_err!("conv2d: input {:?} vs kernels {:?}", ti.shape(), tk.shape()));
        }
        let geom = ConvGeom::new(c, h, w, kh, kw, stride, pad).ok_or_else(|| {
            dim_err!(
                "conv2d: kernel {kh}×{kw} (stride {stride}) larger than padded input {:?} with padding {pad}",
                ti.shape()
            )
        })?;
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![S::zero(); images * pl * ol];
        let mut out = vec![S::zero(); images * k * ol];
        for img in 0..images {
            let col = &mut cols[img * pl * ol..(img + 1) * pl * ol];
            kernels::im2col(&geom, &ti.data()[img * geom.in_len()..(img + 1) * geom.in_len()], col);
            kernels::gemm_nn(k, pl, ol, tk.data(), col, &mut out[img * k * ol..(img + 1) * k * ol]);
        }
        let shape: Vec<usize> =
            if ti.rank() == 3 { vec![k, geom.out_h, geom.out_w] } else { vec![images, k, geom.out_h, geom.out_w] };
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Conv2d { input, kernels: kernels_var, geom, images, cols }))
    }

    /// Adds `bias[k]` to every element of channel `k` of a `(N×)K×H×W` tensor.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (ti, tb) = (self.value(input), self.value(bias));
        let channels = match ti.shape() {
            [k, _, _] | [_, k, _, _] => *k,
            s => return Err(dim_err!("channel bias: bad input shape {s:?}")),
        };
        if tb.len() != channels {
            return Err(dim_err!("channel bias: {} values for {channels} channels", tb.len()));
        }
        let plane = ti.shape()[ti.rank() - 2] * ti.shape()[ti.rank() - 1];
        let mut data = ti.data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let b = tb.data()[i % channels];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let t = Tensor::new(ti.shape(), data)?;
        Ok(self.push(t, Op::ChannelBias { input, bias, channels, plane }))
    }

    /// 2×2 max pooling with stride 2 over the last two axes (even extents).
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let ti = self.value(input);
        let r = ti.rank();
        if r < 2 {
            return Err(dim_err!("max_pool2: rank {r} input"));
        }
        let (h, w) = (ti.shape()[r - 2], ti.shape()[r - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err!("max_pool2: spatial extent {h}×{w} is not even"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let planes = ti.len() / (h * w);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let d = ti.data();
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * x + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = ti.shape().to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MaxPool2 { input, argmax }))
    }

    /// Smallest gap between the largest and second-largest entry of any
    /// pooling window in the graph; `None` without pooling. Small gaps mean
    /// the function is close to a kink.
    pub fn min_pool_margin(&self) -> Option<S> {
        let mut margin: Option<S> = None;
        for node in &self.nodes {
            let Op::MaxPool2 { input, .. } = &node.op else { continue };
            let t = self.value(*input);
            let r = t.rank();
            let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
            for plane in t.data().chunks(h * w) {
                for y in (0..h).step_by(2) {
                    for x in (0..w).step_by(2) {
                        let mut v = [
                            plane[y * w + x],
                            plane[y * w + x + 1],
                            plane[(y + 1) * w + x],
                            plane[(y + 1) * w + x + 1],
                        ];
                        v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
                        let gap = v[0] - v[1];
                        margin = Some(margin.map_or(gap, |m| m.min(gap)));
                    }
                }
            }
        }
        margin
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        matrix_dims("transpose", tx)?;
        let t = tx.transpose()?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims("slice_rows", tx)?;
        if len == 0 || start + len > m {
            return Err(dim_err!("slice_rows: rows {start}..{} of {m}", start + len));
        }
        let t = Tensor::new(&[len, n], tx.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(t, Op::SliceRows { input: x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract_err!("concat_rows of nothing"));
        }
        let n = matrix_dims("concat_rows", self.value(parts[0]))?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = matrix_dims("concat_rows", self.value(p))?;
            if c != n {
                return Err(dim_err!("concat_rows: column counts {n} and {c}"));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let t = Tensor::new(&[rows, n], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract_err!("concat_cols of nothing"));
        }
        let m = matrix_dims("concat_cols", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.value(p))?;
            if r != m {
                return Err(dim_err!("concat_cols: row counts {m} and {r}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(&[m, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Column means of an `m×n` matrix, as `1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims("mean_rows", tx)?;
        let inv = S::one() / S::from_usize(m).unwrap();
        // Each column is summed in sorted order, so permuting the rows
        // leaves the result bit-identical.
        let mut col = Vec::with_capacity(m);
        let out: Vec<S> = (0..n)
            .map(|j| {
                col.clear();
                col.extend((0..m).map(|i| tx.data()[i * n + j]));
                col.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                col.iter().fold(S::zero(), |acc, &v| acc + v) * inv
            })
            .collect();
        let t = Tensor::new(&[1, n], out)?;
        Ok(self.push(t, Op::MeanRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x))
    }

    /// Per-row normalization to zero mean and unit variance, then
    /// `gain ⊙ x̂ + offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: S) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims("layer_norm", tx)?;
        let (tg, to) = (self.value(gain), self.value(offset));
        if tg.len() != n || to.len() != n {
            return Err(dim_err!("layer_norm: width {n}, gain {:?}, offset {:?}", tg.shape(), to.shape()));
        }
        let nf = S::from_usize(n).unwrap();
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * tg.data()[j] + to.data()[j];
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::LayerNorm { input: x, gain, offset, xhat, inv_std }))
    }

    /// `-ln(max(x[index], clamp))` as a scalar.
    pub fn neg_log_pick(&mut self, x: Var, index: usize, clamp: S) -> Result<Var> {
        let tx = self.value(x);
        if index >= tx.len() {
            return Err(contract_err!("index {index} out of range for {} entries", tx.len()));
        }
        let p = tx.data()[index].max(clamp);
        let t = Tensor::scalar(-p.ln());
        Ok(self.push(t, Op::NegLogPick { input: x, index, clamp }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(contract_err!("backward needs a scalar root, got shape {:?}", root.shape()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self.bound.iter().map(|(k, v)| (k.clone(), *v)).collect();
        Ok(Gradients { by_node: grads, params, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).shape()[1];
                {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    kernels::gemm_nt(m, n, k, g, val(*b).data(), ga);
                }
                let gb = accumulate(&mut grads[b.0], k * n);
                kernels::gemm_tn(k, m, n, val(*a).data(), g, gb);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                for (d, &gv) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
                for (d, &gv) in accumulate(&mut grads[b.0], g.len()).iter_mut().zip(g) {
                    *d += sign * gv;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                for ((d, &gv), &o) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(tb) {
                    *d += gv * o;
                }
                for ((d, &gv), &o) in accumulate(&mut grads[b.0], g.len()).iter_mut().zip(g).zip(ta) {
                    *d += gv * o;
                }
            }
            Op::AddRow(x, row) => {
                let n = val(*row).len();
                for (d, &gv) in accumulate(&mut grads[x.0], g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
                let gr = accumulate(&mut grads[row.0], n);
                for chunk in g.chunks(n) {
                    for (d, &gv) in gr.iter_mut().zip(chunk) {
                        *d += gv;
                    }
                }
            }
            Op::Affine(x, s) => {
                for (d, &gv) in accumulate(&mut grads[x.0], g.len()).iter_mut().zip(g) {
                    *d += *s * gv;
                }
            }
            Op::Act(x, kind) => {
                let (xs, ys) = (val(*x).data(), node.value.data());
                let gx = accumulate(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * kind.derivative(xs[i], ys[i]);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let gx = accumulate(&mut grads[x.0], g.len());
                for (r, (yr, gr)) in y.data().chunks(n).zip(g.chunks(n)).enumerate() {
                    let dotv: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += yr[j] * (gr[j] - dotv);
                    }
                }
            }
            Op::Conv2d { input, kernels: kv, geom, images, cols } => {
                let k = val(*kv).shape()[0];
                let (pl, ol, il) = (geom.patch_len(), geom.out_len(), geom.in_len());
                let wk = val(*kv).data();
                {
                    let gk = accumulate(&mut grads[kv.0], k * pl);
                    for img in 0..*images {
                        let gi = &g[img * k * ol..(img + 1) * k * ol];
                        kernels::gemm_nt(k, ol, pl, gi, &cols[img * pl * ol..(img + 1) * pl * ol], gk);
                    }
                }
                let gin = accumulate(&mut grads[input.0], images * il);
                let mut dcol = vec![S::zero(); pl * ol];
                for img in 0..*images {
                    dcol.iter_mut().for_each(|v| *v = S::zero());
                    let gi = &g[img * k * ol..(img + 1) * k * ol];
                    kernels::gemm_tn(pl, k, ol, wk, gi, &mut dcol);
                    kernels::col2im(geom, &dcol, &mut gin[img * il..(img + 1) * il]);
                }
            }
            Op::ChannelBias { input, bias, channels, plane } => {
                for (d, &gv) in accumulate(&mut grads[input.0], g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
                let gb = accumulate(&mut grads[bias.0], *channels);
                for (i, chunk) in g.chunks(*plane).enumerate() {
                    gb[i % channels] += chunk.iter().copied().sum::<S>();
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let gx = accumulate(&mut grads[input.0], val(*input).len());
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
            }
            Op::Reshape(x) => {
                for (d, &gv) in accumulate(&mut grads[x.0], g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = val(*x).dims2().unwrap();
                let gx = accumulate(&mut grads[x.0], r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::SliceRows { input, start } => {
                let n = val(*input).shape()[1];
                let gx = accumulate(&mut grads[input.0], val(*input).len());
                for (d, &gv) in gx[start * n..start * n + g.len()].iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    for (d, &gv) in accumulate(&mut grads[p.0], len).iter_mut().zip(&g[off..off + len]) {
                        *d += gv;
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col0 = 0;
                for p in parts {
                    let (r, c) = val(*p).dims2().unwrap();
                    let gp = accumulate(&mut grads[p.0], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gp[i * c + j] += g[i * total + col0 + j];
                        }
                    }
                    col0 += c;
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = val(*x).dims2().unwrap();
                let inv = S::one() / S::from_usize(m).unwrap();
                let gx = accumulate(&mut grads[x.0], m * n);
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j] * inv;
                    }
                }
            }
            Op::Sum(x) => {
                let len = val(*x).len();
                for d in accumulate(&mut grads[x.0], len).iter_mut() {
                    *d += g[0];
                }
            }
            Op::LayerNorm { input, gain, offset, xhat, inv_std } => {
                let (m, n) = val(*input).dims2().unwrap();
                let gamma = val(*gain).data();
                {
                    let gg = accumulate(&mut grads[gain.0], n);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                {
                    let go = accumulate(&mut grads[offset.0], n);
                    for i in 0..m {
                        for j in 0..n {
                            go[j] += g[i * n + j];
                        }
                    }
                }
                let nf = S::from_usize(n).unwrap();
                let gx = accumulate(&mut grads[input.0], m * n);
                let mut dxh = vec![S::zero(); n];
                for i in 0..m {
                    let mut mean_d = S::zero();
                    let mut mean_dx = S::zero();
                    for j in 0..n {
                        dxh[j] = g[i * n + j] * gamma[j];
                        mean_d += dxh[j];
                        mean_dx += dxh[j] * xhat[i * n + j];
                    }
                    mean_d /= nf;
                    mean_dx /= nf;
                    for j in 0..n {
                        gx[i * n + j] += inv_std[i] * (dxh[j] - mean_d - xhat[i * n + j] * mean_dx);
                    }
                }
            }
            Op::NegLogPick { input, index, clamp } => {
                let len = val(*input).len();
                let p = val(*input).data()[*index];
                let gx = accumulate(&mut grads[input.0], len);
                if p > *clamp {
                    gx[*index] += -g[0] / p;
                }
            }
        }
    }
}

/// Row-wise stable softmax of a plain tensor.
pub fn softmax_rows<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    if t.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let n = *t.shape().last().unwrap();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(n) {
        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(t.shape(), out)
}

/// Output of [`Graph::backward`].
pub struct Gradients<S> {
    by_node: Vec<Option<Vec<S>>>,
    params: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        let shape = &self.shapes[v.0];
        match &self.by_node[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Names of the bound parameters the loss depends on.
    pub fn reached_params(&self) -> impl Iterator<Item = &str> {
        self.params.iter().filter(|(_, v)| self.by_node[v.0].is_some()).map(|(n, _)| n.as_str())
    }

    /// Adds parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) -> Result<()> {
        for (name, v) in &self.params {
            let Some(g) = &self.by_node[v.0] else { continue };
            let p = store.get_mut(name)?;
            if p.grad.len() != g.len() {
                return Err(dim_err!("gradient for {name:?} has {} entries, parameter {}", g.len(), p.grad.len()));
            }
            for (d, &gv) in p.grad.data_mut().iter_mut().zip(g) {
                *d += gv;
            }
        }
        Ok(())
    }
}
