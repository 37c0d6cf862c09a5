//! Independent references and measured deviations, shared by the
//! integration tests and the acceptance runner.
#![allow(dead_code, clippy::needless_range_loop)]

use sthar::attention::{scaled_dot_attention, EncoderBlock, MultiHead};
use sthar::data::{synth_generate, SyntheticSpec, WindowMode};
use sthar::gradcheck::tiny_model_config;
use sthar::models::{Model, ModelKind};
use sthar::recurrent::{GruCell, LstmCell, RnnCell};
use sthar::vision::Frame;
use sthar::{Graph, ParamStore, Tensor};

/// One affine gate `act(W·h + U·x + b)`, evaluated with plain loops.
pub struct Gate {
    w: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Gate {
    pub fn read(store: &ParamStore<f64>, prefix: &str, nh: usize, nx: usize) -> Self {
        let m = |name: &str, cols: usize| -> Vec<Vec<f64>> {
            store.value(&format!("{prefix}.{name}")).unwrap().data().chunks(cols).map(|r| r.to_vec()).collect()
        };
        let g = Self { w: m("w", nh), u: m("u", nx), b: store.value(&format!("{prefix}.b")).unwrap().data().to_vec() };
        assert_eq!((g.w.len(), g.u.len(), g.b.len()), (nh, nh, nh));
        g
    }

    pub fn eval(&self, h: &[f64], x: &[f64], act: fn(f64) -> f64) -> Vec<f64> {
        (0..self.b.len())
            .map(|i| {
                let mut s = self.b[i];
                for j in 0..h.len() {
                    s += self.w[i][j] * h[j];
                }
                for j in 0..x.len() {
                    s += self.u[i][j] * x[j];
                }
                act(s)
            })
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

/// Parameters from `init`, then shifted so biases are not at their defaults.
pub fn random_store(init: impl Fn(&mut ParamStore<f64>, &mut sthar::rng::Rng), seed: u64) -> ParamStore<f64> {
    let mut rng = sthar::rng::seeded(seed);
    let mut store = ParamStore::new();
    init(&mut store, &mut rng);
    for (_, p) in store.iter_mut() {
        let shift = Tensor::<f64>::uniform(p.value.shape(), 0.5, &mut rng);
        p.value.data_mut().iter_mut().zip(shift.data()).for_each(|(v, s)| *v += s);
    }
    store
}

pub fn inputs(steps: usize, nx: usize, seed: u64) -> Vec<Vec<f64>> {
    let t = Tensor::<f64>::uniform(&[steps, nx], 2.0, &mut sthar::rng::seeded(seed));
    t.data().chunks(nx).map(|r| r.to_vec()).collect()
}

fn max_diff(a: &Tensor<f64>, b: &[f64]) -> f64 {
    a.data().iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest |h| or |c| gap between the LSTM cell and the loop reference.
pub fn lstm_deviation(steps: usize) -> f64 {
    let (nh, nx) = (5, 3);
    let cell = LstmCell::new("lstm", nh, nx);
    let store = random_store(|s, r| cell.init(s, r).unwrap(), 1);
    let gates: Vec<Gate> =
        ["f", "i", "c", "o"].iter().map(|n| Gate::read(&store, &format!("lstm.{n}"), nh, nx)).collect();

    let mut g = Graph::new();
    let mut h = g.input(Tensor::zeros(&[nh, 1]));
    let mut c = g.input(Tensor::zeros(&[nh, 1]));
    let (mut rh, mut rc) = (vec![0.0; nh], vec![0.0; nh]);
    let mut worst: f64 = 0.0;
    for x in &inputs(steps, nx, 2) {
        let xv = g.input(Tensor::from_f64(&[nx, 1], x).unwrap());
        let s = cell.step(&mut g, &store, h, c, xv).unwrap();
        (h, c) = (s.h, s.c);

        let f = gates[0].eval(&rh, x, sigmoid);
        let i = gates[1].eval(&rh, x, sigmoid);
        let cand = gates[2].eval(&rh, x, tanh);
        let o = gates[3].eval(&rh, x, sigmoid);
        rc = (0..nh).map(|k| f[k] * rc[k] + i[k] * cand[k]).collect();
        rh = (0..nh).map(|k| rc[k].tanh() * o[k]).collect();

        worst = worst.max(max_diff(g.value(h), &rh)).max(max_diff(g.value(c), &rc));
    }
    worst
}

pub fn gru_deviation(steps: usize) -> f64 {
    let (nh, nx) = (4, 6);
    let cell = GruCell::new("gru", nh, nx);
    let store = random_store(|s, r| cell.init(s, r).unwrap(), 3);
    let gates: Vec<Gate> = ["z", "r", "h"].iter().map(|n| Gate::read(&store, &format!("gru.{n}"), nh, nx)).collect();

    let mut g = Graph::new();
    let mut h = g.input(Tensor::zeros(&[nh, 1]));
    let mut rh = vec![0.0; nh];
    let mut worst: f64 = 0.0;
    for x in &inputs(steps, nx, 4) {
        let xv = g.input(Tensor::from_f64(&[nx, 1], x).unwrap());
        h = cell.step(&mut g, &store, h, xv).unwrap().h;

        let z = gates[0].eval(&rh, x, sigmoid);
        let r = gates[1].eval(&rh, x, sigmoid);
        let gated: Vec<f64> = (0..nh).map(|k| r[k] * rh[k]).collect();
        let cand = gates[2].eval(&gated, x, tanh);
        rh = (0..nh).map(|k| z[k] * cand[k] + (1.0 - z[k]) * rh[k]).collect();

        worst = worst.max(max_diff(g.value(h), &rh));
    }
    worst
}

pub fn rnn_deviation(steps: usize) -> f64 {
    let (nh, nx) = (3, 2);
    let cell = RnnCell::new("rnn", nh, nx);
    let store = random_store(|s, r| cell.init(s, r).unwrap(), 5);
    let gate = Gate::read(&store, "rnn", nh, nx);
    let mut g = Graph::new();
    let mut h = g.input(Tensor::zeros(&[nh, 1]));
    let mut rh = vec![0.0; nh];
    let mut worst: f64 = 0.0;
    for x in &inputs(steps, nx, 6) {
        let xv = g.input(Tensor::from_f64(&[nx, 1], x).unwrap());
        h = cell.step(&mut g, &store, h, xv).unwrap();
        rh = gate.eval(&rh, x, tanh);
        worst = worst.max(max_diff(g.value(h), &rh));
    }
    worst
}

/// `h` after one step of an all-zero LSTM with `c_prev = 1`, `h_prev = 0`, `x = 1`.
pub fn zero_lstm_step() -> (f64, f64) {
    let cell = LstmCell::new("lstm", 1, 1);
    let mut store = ParamStore::<f64>::new();
    cell.init(&mut store, &mut sthar::rng::seeded(0)).unwrap();
    for (_, p) in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let h = g.input(Tensor::zeros(&[1, 1]));
    let c = g.input(Tensor::ones(&[1, 1]));
    let x = g.input(Tensor::ones(&[1, 1]));
    let s = cell.step(&mut g, &store, h, c, x).unwrap();
    (g.value(s.h).data()[0], g.value(s.c).data()[0])
}

fn random_matrix(rows: usize, cols: usize, rng: &mut sthar::rng::Rng) -> Tensor<f64> {
    Tensor::uniform(&[rows, cols], 3.0, rng)
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (_, n) = t.dims2().unwrap();
    let data = perm.iter().flat_map(|&i| t.data()[i * n..(i + 1) * n].to_vec()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

/// Worst |row sum − 1| of attention weights over random draws.
pub fn attention_row_sum_deviation(trials: usize, seed: u64) -> f64 {
    let mut rng = sthar::rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (m, n, d) = (1 + t % 7, 1 + (t * 3) % 11, 1 + t % 5);
        let mut g = Graph::new();
        let q = g.input(random_matrix(m, d, &mut rng));
        let k = g.input(random_matrix(n, d, &mut rng));
        let v = g.input(random_matrix(n, 2, &mut rng));
        let (_, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        for row in g.value(w).data().chunks(n) {
            assert!(row.iter().all(|&p| p >= 0.0));
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}

/// One head with identity projections against plain self-attention.
pub fn identity_head_deviation(trials: usize, seed: u64) -> f64 {
    let mut rng = sthar::rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (n, d) = (2 + t % 6, 1 + t % 5);
        let mha = MultiHead::new("mha", d, 1).unwrap();
        let mut store = ParamStore::new();
        for which in ["wq", "wk", "wv"] {
            store.insert(mha.head_name(0, which), Tensor::eye(d)).unwrap();
        }
        store.insert(mha.out_name(), Tensor::eye(d)).unwrap();
        let mut g = Graph::new();
        let x = g.input(random_matrix(n, d, &mut rng));
        let multi = mha.forward(&mut g, &store, x).unwrap();
        let (single, _) = scaled_dot_attention(&mut g, x, x, x).unwrap();
        worst = worst.max(g.value(multi).max_abs_diff(g.value(single)));
    }
    worst
}

/// Encoder block without positions: `f(Px)` against `P f(x)`.
pub fn permutation_deviation(trials: usize, seed: u64) -> f64 {
    let mut rng = sthar::rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let n = 2 + t % 7;
        let block = EncoderBlock::new("b", 8, 2, 16).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng).unwrap();
        let x = random_matrix(n, 8, &mut rng);
        // random permutation: order indices by random keys
        let keys = Tensor::<f64>::uniform(&[n], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by(|&a, &b| keys.data()[a].total_cmp(&keys.data()[b]));
        let run = |input: Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.input(input);
            let y = block.forward(&mut g, &store, xv).unwrap();
            g.value(y).clone()
        };
        worst = worst.max(run(permute_rows(&x, &perm)).max_abs_diff(&permute_rows(&run(x), &perm)));
    }
    worst
}

/// A `translate_fast` clip (motion makes every frame distinct) and the same
/// clip with its first and last frames exchanged.
pub fn swapped_probe(context: usize) -> (Vec<Frame<f32>>, Vec<Frame<f32>>) {
    let spec = SyntheticSpec {
        clips_per_class: 1,
        subjects: 1,
        frame_shape: [1, 16, 16],
        clip_length: 8,
        max_context: context,
        ..Default::default()
    };
    let m = synth_generate(&spec).unwrap();
    let rec = m.records.iter().find(|r| r.class_name == "translate_fast").unwrap();
    let clip: Vec<Frame<f32>> = rec.window(context, WindowMode::Center).unwrap();
    let mut swapped = clip.clone();
    swapped.swap(0, context - 1);
    assert_ne!(swapped[0].tensor(), clip[0].tensor(), "probe frames must differ");
    (clip, swapped)
}

pub fn logit_bits(kind: ModelKind, clip: &[Frame<f32>]) -> Vec<u32> {
    let model = Model::<f32>::new(tiny_model_config(kind)).unwrap();
    model.logits(clip).unwrap().data().iter().map(|v| v.to_bits()).collect()
}
