//! Vanilla RNN, LSTM and GRU cells plus a many-to-one runner.
//!
//! Vectors are column matrices (`n×1`) inside the graph so every gate reads
//! as `act(W·h + U·x + b)`. Parameters live in a [`ParamStore`] under a
//! per-cell prefix:
//!
//! | cell    | names                                      |
//! |---------|--------------------------------------------|
//! | vanilla | `{p}.w`, `{p}.u`, `{p}.b`                  |
//! | lstm    | `{p}.{f,i,c,o}.{w,u,b}`                    |
//! | gru     | `{p}.{z,r,h}.{w,u,b}`                      |

use rand::Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::graph::{Activation, Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Vanilla,
    Lstm,
    Gru,
}

/// Registers `{prefix}.w` (`n_h×n_h`), `{prefix}.u` (`n_h×n_x`) and a zero
/// (or `bias`-filled) `{prefix}.b`.
fn init_gate<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    prefix: &str,
    hidden: usize,
    input: usize,
    bias: f64,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), Tensor::uniform(&[hidden, hidden], 1.0 / (hidden as f64).sqrt(), rng))?;
    store.insert(format!("{prefix}.u"), Tensor::uniform(&[hidden, input], 1.0 / (input as f64).sqrt(), rng))?;
    store.insert(format!("{prefix}.b"), Tensor::full(&[hidden], S::lit(bias)))?;
    Ok(())
}

/// `act(W·h + U·x + b)` with `h`, `x` already columns.
fn gate<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    h: Var,
    x: Var,
    act: Activation,
) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let u = g.param(store, &format!("{prefix}.u"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let n = g.value(b).len();
    let b = g.reshape(b, &[n, 1])?;
    let wh = g.matmul(w, h)?;
    let ux = g.matmul(u, x)?;
    let s = g.add(wh, ux)?;
    let s = g.add(s, b)?;
    Ok(g.activation(s, act))
}

/// Reshapes a vector node to an `n×1` column, checking its length.
fn column<S: Scalar>(g: &mut Graph<S>, v: Var, n: usize, what: &str) -> Result<Var> {
    let len = g.value(v).len();
    if len != n {
        return Err(dim_err!("{what}: expected length {n}, got shape {:?}", g.value(v).shape()));
    }
    if g.value(v).shape() == [n, 1] {
        return Ok(v);
    }
    g.reshape(v, &[n, 1])
}

/// `h = tanh(W·h_prev + U·x + b)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RnnCell {
    pub prefix: String,
    pub hidden: usize,
    pub input: usize,
}

impl RnnCell {
    pub fn new(prefix: impl Into<String>, hidden: usize, input: usize) -> Self {
        Self { prefix: prefix.into(), hidden, input }
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        init_gate(store, &self.prefix, self.hidden, self.input, 0.0, rng)
    }

    pub fn step<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, h_prev: Var, x: Var) -> Result<Var> {
        let h = column(g, h_prev, self.hidden, "rnn hidden state")?;
        let x = column(g, x, self.input, "rnn input")?;
        gate(g, store, &self.prefix, h, x, Activation::Tanh)
    }
}

/// Every intermediate of one LSTM step.
#[derive(Clone, Copy, Debug)]
pub struct LstmStep {
    pub forget: Var,
    pub input: Var,
    pub candidate: Var,
    pub output: Var,
    pub c: Var,
    pub h: Var,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmCell {
    pub prefix: String,
    pub hidden: usize,
    pub input: usize,
}

impl LstmCell {
    pub const GATES: [&'static str; 4] = ["f", "i", "c", "o"];

    pub fn new(prefix: impl Into<String>, hidden: usize, input: usize) -> Self {
        Self { prefix: prefix.into(), hidden, input }
    }

    /// Forget-gate bias starts at +1, all other biases at zero.
    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        for gname in Self::GATES {
            let bias = if gname == "f" { 1.0 } else { 0.0 };
            init_gate(store, &format!("{}.{gname}", self.prefix), self.hidden, self.input, bias, rng)?;
        }
        Ok(())
    }

    pub fn step<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        h_prev: Var,
        c_prev: Var,
        x: Var,
    ) -> Result<LstmStep> {
        let h_prev = column(g, h_prev, self.hidden, "lstm hidden state")?;
        let c_prev = column(g, c_prev, self.hidden, "lstm cell state")?;
        let x = column(g, x, self.input, "lstm input")?;
        let p = &self.prefix;
        let forget = gate(g, store, &format!("{p}.f"), h_prev, x, Activation::Sigmoid)?;
        let input = gate(g, store, &format!("{p}.i"), h_prev, x, Activation::Sigmoid)?;
        let candidate = gate(g, store, &format!("{p}.c"), h_prev, x, Activation::Tanh)?;
        let kept = g.mul(forget, c_prev)?;
        let added = g.mul(input, candidate)?;
        let c = g.add(kept, added)?;
        let output = gate(g, store, &format!("{p}.o"), h_prev, x, Activation::Sigmoid)?;
        // h = tanh(c) ⊙ o
        let tc = g.tanh(c);
        let h = g.mul(tc, output)?;
        Ok(LstmStep { forget, input, candidate, output, c, h })
    }
}

/// Every intermediate of one GRU step.
#[derive(Clone, Copy, Debug)]
pub struct GruStep {
    pub update: Var,
    pub reset: Var,
    pub candidate: Var,
    pub h: Var,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub prefix: String,
    pub hidden: usize,
    pub input: usize,
}

impl GruCell {
    pub const GATES: [&'static str; 3] = ["z", "r", "h"];

    pub fn new(prefix: impl Into<String>, hidden: usize, input: usize) -> Self {
        Self { prefix: prefix.into(), hidden, input }
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        for gname in Self::GATES {
            init_gate(store, &format!("{}.{gname}", self.prefix), self.hidden, self.input, 0.0, rng)?;
        }
        Ok(())
    }

    pub fn step<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, h_prev: Var, x: Var) -> Result<GruStep> {
        let h_prev = column(g, h_prev, self.hidden, "gru hidden state")?;
        let x = column(g, x, self.input, "gru input")?;
        let p = &self.prefix;
        let update = gate(g, store, &format!("{p}.z"), h_prev, x, Activation::Sigmoid)?;
        let reset = gate(g, store, &format!("{p}.r"), h_prev, x, Activation::Sigmoid)?;
        let gated = g.mul(reset, h_prev)?;
        let candidate = gate(g, store, &format!("{p}.h"), gated, x, Activation::Tanh)?;
        // h = z ⊙ h̃ + (1 - z) ⊙ h_prev
        let take_new = g.mul(update, candidate)?;
        let keep = g.affine(update, -S::one(), S::one());
        let take_old = g.mul(keep, h_prev)?;
        let h = g.add(take_new, take_old)?;
        Ok(GruStep { update, reset, candidate, h })
    }
}

/// Any of the three cells behind one interface.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Recurrent {
    Vanilla(RnnCell),
    Lstm(LstmCell),
    Gru(GruCell),
}

impl Recurrent {
    pub fn new(kind: CellKind, prefix: impl Into<String>, hidden: usize, input: usize) -> Self {
        match kind {
            CellKind::Vanilla => Recurrent::Vanilla(RnnCell::new(prefix, hidden, input)),
            CellKind::Lstm => Recurrent::Lstm(LstmCell::new(prefix, hidden, input)),
            CellKind::Gru => Recurrent::Gru(GruCell::new(prefix, hidden, input)),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Recurrent::Vanilla(_) => CellKind::Vanilla,
            Recurrent::Lstm(_) => CellKind::Lstm,
            Recurrent::Gru(_) => CellKind::Gru,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Recurrent::Vanilla(c) => c.hidden,
            Recurrent::Lstm(c) => c.hidden,
            Recurrent::Gru(c) => c.hidden,
        }
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) -> Result<()> {
        match self {
            Recurrent::Vanilla(c) => c.init(store, rng),
            Recurrent::Lstm(c) => c.init(store, rng),
            Recurrent::Gru(c) => c.init(store, rng),
        }
    }

    /// Feeds `xs` in order and returns the final hidden state `h_T` as an
    /// `n_h×1` column. Missing initial states default to zeros; `c0` is only
    /// read by the LSTM.
    pub fn run_many_to_one<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        xs: &[Var],
        h0: Option<Var>,
        c0: Option<Var>,
    ) -> Result<Var> {
        if xs.is_empty() {
            return Err(contract_err!("many-to-one run over an empty sequence"));
        }
        let n = self.hidden();
        let mut h = match h0 {
            Some(h) => h,
            None => g.input(Tensor::zeros(&[n, 1])),
        };
        match self {
            Recurrent::Vanilla(cell) => {
                for &x in xs {
                    h = cell.step(g, store, h, x)?;
                }
            }
            Recurrent::Lstm(cell) => {
                let mut c = match c0 {
                    Some(c) => c,
                    None => g.input(Tensor::zeros(&[n, 1])),
                };
                for &x in xs {
                    let s = cell.step(g, store, h, c, x)?;
                    h = s.h;
                    c = s.c;
                }
            }
            Recurrent::Gru(cell) => {
                for &x in xs {
                    h = cell.step(g, store, h, x)?.h;
                }
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::seeded;

    fn zero_store(cell: &Recurrent) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        cell.init(&mut s, &mut seeded(1)).unwrap();
        for (_, p) in s.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        s
    }

    #[test]
    fn vanilla_zero_params_give_zero_state() {
        let cell = RnnCell::new("rnn", 3, 2);
        let s = zero_store(&Recurrent::Vanilla(cell.clone()));
        let mut g = Graph::new();
        let h = g.input(Tensor::from_f64(&[3], &[0.3, -0.2, 0.9]).unwrap());
        let x = g.input(Tensor::from_f64(&[2], &[1.0, -4.0]).unwrap());
        let out = cell.step(&mut g, &s, h, x).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vanilla_pass_through() {
        let cell = RnnCell::new("rnn", 2, 2);
        let mut s = zero_store(&Recurrent::Vanilla(cell.clone()));
        s.set_value("rnn.u", Tensor::eye(2)).unwrap();
        let mut g = Graph::new();
        let h = g.input(Tensor::from_f64(&[2], &[5.0, 5.0]).unwrap());
        let x = g.input(Tensor::from_f64(&[2], &[0.4, -1.3]).unwrap());
        let out = cell.step(&mut g, &s, h, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.4f64.tanh(), (-1.3f64).tanh()]);
    }

    #[test]
    fn lstm_zero_params_closed_form() {
        let cell = LstmCell::new("lstm", 1, 1);
        let s = zero_store(&Recurrent::Lstm(cell.clone()));
        let mut g = Graph::new();
        let h = g.input(Tensor::zeros(&[1]));
        let c = g.input(Tensor::ones(&[1]));
        let x = g.input(Tensor::zeros(&[1]));
        let st = cell.step(&mut g, &s, h, c, x).unwrap();
        for gate in [st.forget, st.input, st.output] {
            assert_eq!(g.value(gate).data(), &[0.5]);
        }
        assert_eq!(g.value(st.candidate).data(), &[0.0]);
        assert_eq!(g.value(st.c).data(), &[0.5]);
        assert!((g.value(st.h).data()[0] - 0.23106).abs() < 1e-5);
    }

    #[test]
    fn lstm_saturated_gates_keep_cell() {
        let cell = LstmCell::new("lstm", 2, 3);
        let mut s = ParamStore::<f64>::new();
        cell.init(&mut s, &mut seeded(4)).unwrap();
        s.set_value("lstm.f.b", Tensor::full(&[2], 20.0)).unwrap();
        s.set_value("lstm.i.b", Tensor::full(&[2], -20.0)).unwrap();
        let mut g = Graph::new();
        let h = g.input(Tensor::from_f64(&[2], &[0.2, -0.1]).unwrap());
        let c = g.input(Tensor::from_f64(&[2], &[0.7, -1.5]).unwrap());
        let x = g.input(Tensor::from_f64(&[3], &[0.5, 0.5, -0.5]).unwrap());
        let st = cell.step(&mut g, &s, h, c, x).unwrap();
        let cv = g.value(st.c).data();
        assert!((cv[0] - 0.7).abs() < 1e-6 && (cv[1] + 1.5).abs() < 1e-6);
    }

    #[test]
    fn gru_saturation_limits() {
        let cell = GruCell::new("gru", 2, 2);
        for (bias, expect_candidate) in [(20.0, true), (-20.0, false)] {
            let mut s = ParamStore::<f64>::new();
            cell.init(&mut s, &mut seeded(9)).unwrap();
            s.set_value("gru.z.b", Tensor::full(&[2], bias)).unwrap();
            let mut g = Graph::new();
            let h = g.input(Tensor::from_f64(&[2], &[0.6, -0.4]).unwrap());
            let x = g.input(Tensor::from_f64(&[2], &[1.0, 0.25]).unwrap());
            let st = cell.step(&mut g, &s, h, x).unwrap();
            let target = if expect_candidate {
                g.value(st.candidate).clone()
            } else {
                g.value(h).clone().reshape(&[2, 1]).unwrap()
            };
            assert!(g.value(st.h).max_abs_diff(&target) < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let cell = RnnCell::new("rnn", 3, 2);
        let mut s = ParamStore::<f64>::new();
        cell.init(&mut s, &mut seeded(0)).unwrap();
        let mut g = Graph::new();
        let h = g.input(Tensor::zeros(&[3]));
        let x = g.input(Tensor::zeros(&[4]));
        assert!(matches!(cell.step(&mut g, &s, h, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn many_to_one_base_case_and_empty() {
        let rec = Recurrent::new(CellKind::Gru, "gru", 3, 2);
        let mut s = ParamStore::<f64>::new();
        rec.init(&mut s, &mut seeded(2)).unwrap();
        let mut g = Graph::new();
        assert!(matches!(rec.run_many_to_one(&mut g, &s, &[], None, None), Err(Error::Contract(_))));
        let x = g.input(Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap());
        let out = rec.run_many_to_one(&mut g, &s, &[x], None, None).unwrap();
        let h0 = g.input(Tensor::zeros(&[3]));
        let Recurrent::Gru(cell) = &rec else { unreachable!() };
        let one = cell.step(&mut g, &s, h0, x).unwrap().h;
        assert_eq!(g.value(out), g.value(one));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let cell = LstmCell::new("l", 4, 2);
        let mut s = ParamStore::<f32>::new();
        cell.init(&mut s, &mut seeded(0)).unwrap();
        assert!(s.value("l.f.b").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(s.value("l.i.b").unwrap().data().iter().all(|&v| v == 0.0));
        let bound = 1.0 / 2f32.sqrt();
        assert!(s.value("l.o.u").unwrap().data().iter().all(|&v| v.abs() <= bound));
    }
}
