//! Statistical and structural properties of the tensor engine and feature
//! extraction.

use awe_core::corpus::mfsc::MfscConfig;
use awe_core::corpus::{extract_mfsc, ngram_inventory, ngrams_of};
use awe_core::rng::SeededRng;
use awe_core::tensor::{Graph, Mode, ParamStore, Tensor};
use proptest::prelude::*;
use std::collections::BTreeMap;

#[test]
fn batch_norm_train_output_is_standardized() {
    let mut store = ParamStore::<f64>::new();
    let cols = 5;
    let gamma = store.add("gamma", Tensor::filled(&[1, cols], 1.0), true);
    let beta = store.add("beta", Tensor::zeros(&[1, cols]), true);
    let rm = store.add("rm", Tensor::zeros(&[1, cols]), false);
    let rv = store.add("rv", Tensor::filled(&[1, cols], 1.0), false);
    let mut rng = SeededRng::new(4);
    let rows = 64;
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.normal() * 3.0 + 1.5)
        .collect();
    let mut g = Graph::new(&store, Mode::Train);
    let x = g.input(Tensor::from_vec(&[rows, cols], data).unwrap()).unwrap();
    let gb = g.param(gamma);
    let bb = g.param(beta);
    let y = g.batch_norm(x, gb, bb, rm, rv, 0.1, 1e-8).unwrap();
    let out = g.value_data(y);
    for c in 0..cols {
        let col: Vec<f64> = (0..rows).map(|r| out[r * cols + c]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        assert!(mean.abs() < 1e-3, "column {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "column {c} var {var}");
    }
}

#[test]
fn batch_norm_eval_is_a_fixed_affine_map() {
    let mut store = ParamStore::<f32>::new();
    let cols = 3;
    let gamma = store.add("gamma", Tensor::from_vec(&[1, cols], vec![2.0, 0.5, 1.0]).unwrap(), true);
    let beta = store.add("beta", Tensor::from_vec(&[1, cols], vec![0.1, -0.2, 0.0]).unwrap(), true);
    let rm = store.add("rm", Tensor::from_vec(&[1, cols], vec![1.0, 2.0, 3.0]).unwrap(), false);
    let rv = store.add("rv", Tensor::from_vec(&[1, cols], vec![4.0, 1.0, 9.0]).unwrap(), false);
    let eval = |vals: Vec<f32>, rows: usize| -> Vec<f32> {
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::from_vec(&[rows, cols], vals).unwrap()).unwrap();
        let gb = g.param(gamma);
        let bb = g.param(beta);
        let y = g.batch_norm(x, gb, bb, rm, rv, 0.1, 1e-5).unwrap();
        g.value_data(y).to_vec()
    };
    let single = eval(vec![2.0, 2.0, 2.0], 1);
    // Same row inside a larger batch: eval-mode output is row-local.
    let batched = eval(vec![2.0, 2.0, 2.0, -7.0, 0.0, 11.0], 2);
    assert_eq!(&batched[..cols], single.as_slice());
    // And matches the affine map directly.
    let expect0 = 2.0 * (2.0 - 1.0) / (4.0f32 + 1e-5).sqrt() + 0.1;
    assert!((single[0] - expect0).abs() < 1e-6);
}

#[test]
fn dropout_preserves_expectation_within_two_percent() {
    let store = ParamStore::<f64>::new();
    let p = 0.3;
    let n = 10_000usize;
    let mut total = 0.0;
    for trial in 0..n {
        let mut g = Graph::with_dropout_seed(&store, Mode::Train, trial as u64);
        let x = g.input(Tensor::from_vec(&[1, 4], vec![1.0; 4]).unwrap()).unwrap();
        let y = g.dropout(x, p).unwrap();
        total += g.value_data(y).iter().sum::<f64>() / 4.0;
    }
    let mean = total / n as f64;
    assert!(
        (mean - 1.0).abs() < 0.02,
        "inverted-scaling mean {mean} drifted beyond 2%"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mfsc_frame_count_formula(
        extra in 0usize..4000,
        window_ms in 10.0f64..40.0,
        hop_ms in 2.0f64..9.9,
    ) {
        let cfg = MfscConfig {
            sample_rate_hz: 16_000,
            window_ms,
            hop_ms,
            n_mels: 8,
            log_floor: 1e-10,
        };
        let window = cfg.window_samples();
        let hop = cfg.hop_samples();
        prop_assume!(window > hop && hop > 0);
        let len = window + extra;
        let pcm = vec![0.0f32; len];
        let t = extract_mfsc(&pcm, &cfg).unwrap();
        prop_assert_eq!(t.shape()[0], (len - window) / hop + 1);
        prop_assert_eq!(t.shape()[1], 8);
    }

    #[test]
    fn ngram_inventory_size_bound_and_coverage(
        words in prop::collection::vec(prop::collection::vec(0usize..5, 1..7), 1..6)
    ) {
        let symbols = ["a", "e", "k", "s", "t"];
        let mut vocab = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            let phones: Vec<String> = w.iter().map(|&j| symbols[j].to_string()).collect();
            vocab.insert(format!("w{i}"), phones);
        }
        let inv = ngram_inventory(&vocab, &[2]).unwrap();
        let bound: usize = vocab.values().map(|p| p.len() + 1).sum();
        prop_assert!(inv.len() <= bound);
        for gram in inv.grams() {
            let covered = vocab.values().any(|p| ngrams_of(p, 2).contains(gram));
            prop_assert!(covered);
        }
    }
}
