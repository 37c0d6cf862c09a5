use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers keyed by parameter name. SGD keeps its velocity in
/// `first` and leaves `second` empty.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<S> {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<S>>,
    pub second: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(kind: OptimizerKind, params: &ParamStore<S>) -> Self {
        let zeros = || params.iter().map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape()))).collect();
        Self {
            kind,
            step: 0,
            first: zeros(),
            second: if kind == OptimizerKind::Adam { zeros() } else { BTreeMap::new() },
        }
    }
}

fn selected(reached: Option<&BTreeSet<String>>, name: &str) -> bool {
    reached.is_none_or(|r| r.contains(name))
}

/// Bias-corrected Adam update using the gradients held in `params`.
/// Only parameters in `reached` (all, when `None`) are touched.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    state: &mut OptimState<S>,
    hyper: &AdamHyper,
    reached: Option<&BTreeSet<String>>,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(hyper.beta1), S::lit(hyper.beta2));
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let (lr, eps) = (S::lit(hyper.lr), S::lit(hyper.eps));
    for (name, p) in params.iter_mut() {
        if !selected(reached, name) {
            continue;
        }
        let m = state.first.get_mut(name).expect("adam first moment").data_mut();
        let v = state.second.get_mut(name).expect("adam second moment").data_mut();
        let g = p.grad.data();
        let w = p.value.data_mut();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (S::one() - b1) * g[i];
            v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// `v = μ·v + g; w -= lr·v`
pub fn sgd_momentum_step<S: Scalar>(
    params: &mut ParamStore<S>,
    state: &mut OptimState<S>,
    lr: f64,
    momentum: f64,
    reached: Option<&BTreeSet<String>>,
) {
    state.step += 1;
    let (lr, mu) = (S::lit(lr), S::lit(momentum));
    for (name, p) in params.iter_mut() {
        if !selected(reached, name) {
            continue;
        }
        let vel = state.first.get_mut(name).expect("velocity").data_mut();
        let g = p.grad.data();
        let w = p.value.data_mut();
        for i in 0..w.len() {
            vel[i] = mu * vel[i] + g[i];
            w[i] -= lr * vel[i];
        }
    }
}
