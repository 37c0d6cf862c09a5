use std::collections::BTreeSet;

use proptest::prelude::*;
use sthar::data::{split_by_subject, ClipRecord, ClipSource, DatasetManifest};
use sthar::graph::softmax_rows;
use sthar::vision::{patchify, unpatchify};
use sthar::{Graph, ParamStore, Tensor};

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let len: usize = shape.iter().product();
    proptest::collection::vec(lo..hi, len).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

fn manifest(subjects: usize) -> DatasetManifest {
    let records = (0..subjects)
        .map(|s| ClipRecord {
            frames: vec![vec![0; 64]],
            shape: [1, 8, 8],
            label: s % 2,
            class_name: format!("c{}", s % 2),
            subject: format!("s{s:03}"),
            clip_id: "k".into(),
            source: ClipSource::Synth { seed: 0 },
        })
        .collect();
    DatasetManifest { classes: vec!["c0".into(), "c1".into()], records, shape: Some([1, 8, 8]), fps: 25.0 }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in tensor(vec![3, 5], -50.0, 50.0)) {
        let p = softmax_rows(&x).unwrap();
        for row in p.data().chunks(5) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(x in tensor(vec![2, 4], -5.0, 5.0), c in -100.0f64..100.0) {
        let a = softmax_rows(&x).unwrap();
        let b = softmax_rows(&x.map(|v| v + c)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn matmul_is_associative(a in tensor(vec![3, 4], -2.0, 2.0), b in tensor(vec![4, 2], -2.0, 2.0), c in tensor(vec![2, 5], -2.0, 2.0)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-12);
    }

    #[test]
    fn transpose_is_an_involution(a in tensor(vec![3, 7], -1.0, 1.0)) {
        prop_assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }

    #[test]
    fn patchify_round_trips(frame in tensor(vec![3, 16, 8], 0.0, 1.0), p in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let patches = patchify(&frame, p).unwrap();
        prop_assert_eq!(patches.shape(), &[16 * 8 / (p * p), 3 * p * p][..]);
        prop_assert_eq!(unpatchify(&patches, p, [3, 16, 8]).unwrap(), frame);
    }

    #[test]
    fn subject_splits_are_disjoint_and_cover(n in 3usize..40, seed in any::<u64>(), train in 0.2f64..0.7) {
        let val = (1.0 - train) / 2.0;
        let m = manifest(n);
        if let Ok(s) = split_by_subject(&m, [train, val, 1.0 - train - val], seed) {
            prop_assert!(s.is_disjoint());
            let all: BTreeSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
            prop_assert_eq!(all.len(), n);
            prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm(g in tensor(vec![4, 3], -100.0, 100.0), b in tensor(vec![5], -100.0, 100.0), max in 0.01f64..10.0) {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(&[4, 3])).unwrap();
        store.insert("b", Tensor::zeros(&[5])).unwrap();
        store.get_mut("a").unwrap().grad = g;
        store.get_mut("b").unwrap().grad = b;
        let before = store.grad_norm();
        let reported = store.clip_grad_norm(max);
        prop_assert_eq!(before, reported);
        prop_assert!(store.grad_norm() <= max + 1e-6);
        if before <= max {
            prop_assert_eq!(store.grad_norm(), before);
        }
    }
}

#[test]
fn unreached_parameters_get_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    store.insert("used", Tensor::ones(&[2])).unwrap();
    store.insert("unused", Tensor::ones(&[2])).unwrap();
    let mut g = Graph::new();
    let u = g.param(&store, "used").unwrap();
    let _ = g.param(&store, "unused").unwrap();
    let y = g.mul(u, u).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.reached_params().collect::<Vec<_>>(), ["used"]);
    grads.accumulate_into(&mut store).unwrap();
    assert_eq!(store.grad("unused").unwrap().data(), &[0.0, 0.0]);
    assert_eq!(store.grad("used").unwrap().data(), &[2.0, 2.0]);
}
