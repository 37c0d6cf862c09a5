//! Central finite-difference checks of analytic gradients (64-bit).

mod suites;

pub use suites::{run_suite, tiny_model_config, Level, CELL_TOL, MODEL_TOL, OP_TOL};

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Elementwise denominators are clamped at this value.
pub const DENOM_FLOOR: f64 = 1e-8;

/// Result of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Where the largest error occurred, as `tensor[index]: analytic vs numeric`.
    pub worst: String,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`; NaN counts as infinite.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let err = (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR);
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max)
}

/// Accumulates entries and remembers the worst one.
struct Tally {
    max: f64,
    checked: usize,
    worst: String,
}

impl Tally {
    fn new() -> Self {
        Self { max: 0.0, checked: 0, worst: String::new() }
    }

    fn push(&mut self, tensor: &str, index: usize, a: f64, n: f64) {
        let e = relative_error(a, n);
        self.checked += 1;
        if e > self.max || self.worst.is_empty() {
            self.max = self.max.max(e);
            self.worst = format!("{tensor}[{index}]: {a:.6e} vs {n:.6e}");
        }
    }

    fn report(self, name: &str, tolerance: f64) -> CheckReport {
        CheckReport {
            name: name.to_string(),
            max_rel_err: self.max,
            tolerance,
            checked: self.checked,
            worst: self.worst,
        }
    }
}

/// Which entries of each tensor get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many entries per tensor, chosen by the supplied seed.
    Sampled {
        per_tensor: usize,
        seed: u64,
    },
}

impl Coverage {
    fn indices(self, len: usize, salt: u64) -> Vec<usize> {
        match self {
            Coverage::All => (0..len).collect(),
            Coverage::Sampled { per_tensor, .. } if per_tensor >= len => (0..len).collect(),
            Coverage::Sampled { per_tensor, seed } => {
                let mut rng = crate::rng::seeded(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut idx = sample(&mut rng, len, per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
        }
    }
}

/// Checks d(loss)/d(input) for every input tensor of `f`.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor<f64>], tolerance: f64, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut tally = Tally::new();
    let mut work = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let ga = grads.wrt(*v);
        for i in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[i];
            work[ti].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work[ti].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            tally.push(&format!("input{ti}"), i, ga.data()[i], (up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(tally.report(name, tolerance))
}

/// Checks d(loss)/d(param) for the parameters of `store`.
pub fn check_params<F>(
    name: &str,
    store: &ParamStore<f64>,
    coverage: Coverage,
    tolerance: f64,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        Ok(g.value(loss).data()[0])
    };

    let mut base = store.clone();
    base.zero_grad();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, &base)?;
        let grads = g.backward(loss)?;
        grads.accumulate_into(&mut base)?;
    }

    let mut tally = Tally::new();
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for (salt, pname) in names.iter().enumerate() {
        let len = store.value(pname)?.len();
        for i in coverage.indices(len, salt as u64) {
            let orig = store.value(pname)?.data()[i];
            work.get_mut(pname)?.value.data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work.get_mut(pname)?.value.data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work.get_mut(pname)?.value.data_mut()[i] = orig;
            tally.push(pname, i, base.grad(pname)?.data()[i], (up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(tally.report(name, tolerance))
}

/// Random tensor with entries bounded away from zero, so kinks (relu, max
/// pooling ties) sit far from the finite-difference stencil.
pub fn random_away_from_zero<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_clamps_denominator() {
        assert_eq!(max_relative_error(&[0.0], &[0.0]), 0.0);
        assert!((max_relative_error(&[1e-12], &[0.0]) - 1e-4).abs() < 1e-12);
        assert!((max_relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn square_passes() {
        let x = Tensor::from_f64(&[2], &[0.3, -0.8]).unwrap();
        let ok = check_inputs("square", std::slice::from_ref(&x), 1e-6, |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert_eq!(ok.checked, 2);
    }
}
