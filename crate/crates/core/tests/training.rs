mod common;

use std::fs;

use common::{rand_tensor, render, scene, sprite, window};
use motseg_core::autograd::gradcheck::check_gradients;
use motseg_core::autograd::{Graph, Tensor};
use motseg_core::datamodel::{DatasetStats, SequenceSample};
use motseg_core::network::{Network, NetworkConfig, Preset, Variant};
use motseg_core::training::{
    compute_class_weights, replicate_first_layer, train, train_step, weighted_cross_entropy, Adam, TrainConfig,
};
use motseg_core::Error;
use proptest::prelude::*;
use rand::Rng;

/// Per-pixel scalar softmax cross-entropy, summed then averaged over
/// non-ignored pixels.
fn scalar_ce(logits: &Tensor, targets: &[u8], weights: &[f64]) -> f64 {
    let s = logits.shape();
    let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..n {
        for p in 0..plane {
            let y = targets[i * plane + p];
            if y == 255 {
                continue;
            }
            let z: Vec<f64> = (0..k).map(|c| logits.data()[(i * k + c) * plane + p]).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            total += weights[y as usize] * -(z[y as usize].exp() / denom).ln();
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn confident_logits_give_near_zero_loss() {
    let targets = [0u8, 1, 1, 0];
    let logits = Tensor::from_fn(&[1, 2, 2, 2], |i| {
        let (c, p) = (i / 4, i % 4);
        if c as u8 == targets[p] { 20.0 } else { 0.0 }
    });
    assert!(weighted_cross_entropy(&logits, &targets, &[1.0, 1.0]).unwrap() < 1e-6);
}

#[test]
fn uniform_logits_give_ln2() {
    let logits = Tensor::full(&[2, 2, 3, 3], 0.7);
    let targets: Vec<u8> = (0..18).map(|i| (i % 2) as u8).collect();
    let l = weighted_cross_entropy(&logits, &targets, &[1.0, 1.0]).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn weighted_loss_matches_scalar_oracle() {
    let mut r = common::rng(41);
    let logits = rand_tensor(&mut r, &[1, 2, 4, 4], 3.0);
    let targets: Vec<u8> = (0..16).map(|i| if i == 5 { 255 } else { r.gen_range(0..2) }).collect();
    let w = [0.1, 2.0];
    let got = weighted_cross_entropy(&logits, &targets, &w).unwrap();
    assert!((got - scalar_ce(&logits, &targets, &w)).abs() < 1e-8);
}

#[test]
fn loss_rejects_bad_targets_and_weights() {
    let logits = Tensor::zeros(&[1, 2, 1, 2]);
    assert!(weighted_cross_entropy(&logits, &[0, 3], &[1.0, 1.0]).is_err());
    assert!(weighted_cross_entropy(&logits, &[0, 1], &[1.0, -1.0]).is_err());
    assert!(weighted_cross_entropy(&logits, &[0], &[1.0, 1.0]).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = common::rng(43);
    let logits = rand_tensor(&mut r, &[2, 2, 3, 3], 2.0);
    let targets: Vec<u8> = (0..18).map(|i| if i % 5 == 0 { 255 } else { r.gen_range(0..2) }).collect();
    let rep = check_gradients(&[logits], 1e-4, false, |g, v| g.weighted_cross_entropy(v[0], &targets, &[0.3, 1.7])).unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

fn stats(a: u64, b: u64) -> DatasetStats {
    DatasetStats { pixel_count_per_class: [a, b], num_samples: 1 }
}

#[test]
fn class_weight_examples() {
    let w = compute_class_weights(&stats(900, 100)).unwrap();
    assert!((w[0] - 1000.0 / 1800.0).abs() < 1e-12 && (w[1] - 5.0).abs() < 1e-12, "{w:?}");
    assert!((w[0] - 0.556).abs() < 5e-4);
    assert_eq!(compute_class_weights(&stats(300, 300)).unwrap(), [1.0, 1.0]);
    assert!(matches!(compute_class_weights(&stats(0, 300)), Err(Error::InsufficientData(_))));
}

#[test]
fn replication_examples() {
    let mut r = common::rng(44);
    let w = rand_tensor(&mut r, &[5, 6, 3, 3], 1.0);
    assert_eq!(replicate_first_layer(&w, 1).unwrap(), w);
    let w4 = replicate_first_layer(&w, 4).unwrap();
    assert_eq!(w4.shape(), &[5, 24, 3, 3]);
    assert!(replicate_first_layer(&w, 0).is_err());

    // a frame stacked four times through the tiled kernel gives the original response
    let x = rand_tensor(&mut r, &[2, 6, 7, 9], 1.0);
    let stacked = {
        let mut g = Graph::new(false);
        let xi = g.input(x.clone());
        let s = g.concat(&[xi, xi, xi, xi]).unwrap();
        g.value(s).clone()
    };
    let conv = |input: &Tensor, k: &Tensor| {
        let mut g = Graph::new(false);
        let (a, b) = (g.input(input.clone()), g.input(k.clone()));
        let y = g.conv2d(a, b, None, 1, 1, 1).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (conv(&x, &w), conv(&stacked, &w4));
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-6));
}

fn samples(n: usize) -> Vec<SequenceSample> {
    (0..n)
        .map(|i| {
            let data = render(&scene(&format!("t{i}"), 32, 64, 4, 1 + i as i64 % 2, vec![
                sprite("m", 12, 10, 8 + 3 * i as i64, 6, 3, i as u64),
                sprite("s", 10, 8, 40, 16, 1 + i as i64 % 2, 50 + i as u64),
            ]));
            window(&data, 3, 4)
        })
        .collect()
}

fn tiny(variant: Variant) -> NetworkConfig {
    NetworkConfig::new(variant, Preset::Tiny)
}

#[test]
fn overfits_a_single_sample() {
    let data = samples(1);
    let cfg = TrainConfig {
        network: tiny(Variant::RgbOnly),
        epochs: 50,
        batch_size: 1,
        learning_rate: 3e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let report = train(&cfg, &data, &[], None).unwrap();
    let losses: Vec<f64> = report.history.iter().map(|m| m.train_loss).collect();
    assert!(losses[..10].windows(2).all(|w| w[1] < w[0]), "{:?}", &losses[..10]);
    assert!(*losses.last().unwrap() < 0.1, "{losses:?}");
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = samples(2);
    let mut net = Network::new(tiny(Variant::RgbFlow), 5).unwrap();
    let before = net.store.params.clone();
    let mut adam = Adam::new(0.0, 5e-4);
    for _ in 0..3 {
        for s in &data {
            train_step(&mut net, &mut adam, &[s], &[0.6, 3.0], 20.0).unwrap();
        }
    }
    assert_eq!(adam.steps(), 6);
    assert_eq!(net.store.params, before);
}

#[test]
fn same_seed_gives_identical_logs_and_checkpoints() {
    let data = samples(4);
    let cfg = TrainConfig {
        network: tiny(Variant::RgbFlow),
        epochs: 2,
        batch_size: 2,
        learning_rate: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&cfg, &data, &data[..1], Some(a.path())).unwrap();
    train(&cfg, &data, &data[..1], Some(b.path())).unwrap();
    for f in ["metrics.csv", "last.ckpt", "best.ckpt", "config.toml"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,train_loss,val_moving_iou,val_miou"), "{log}");
}

#[test]
fn training_ignores_dataset_order() {
    let data = samples(4);
    let mut reversed = data.clone();
    reversed.reverse();
    let cfg = TrainConfig {
        network: tiny(Variant::RgbOnly),
        epochs: 2,
        batch_size: 2,
        learning_rate: 1e-3,
        seed: 4,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &data, &[], None).unwrap();
    let b = train(&cfg, &reversed, &[], None).unwrap();
    assert_eq!(a.network.store, b.network.store);
}

#[test]
fn unlabelled_training_set_rejected() {
    let mut data = samples(1);
    let h = data[0].height();
    let w = data[0].width();
    *data[0].masks.last_mut().unwrap() = Some(motseg_core::datamodel::MotionMask::new(h, w, vec![255; h * w]).unwrap());
    let cfg = TrainConfig { network: tiny(Variant::RgbOnly), epochs: 1, ..TrainConfig::default() };
    assert!(matches!(train(&cfg, &data, &[], None), Err(Error::InsufficientData(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unit_weights_equal_plain_cross_entropy(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let logits = rand_tensor(&mut r, &[1, 2, 3, 5], 4.0);
        let targets: Vec<u8> = (0..15).map(|_| [0u8, 1, 255][r.gen_range(0..3)]).collect();
        prop_assume!(targets.iter().any(|&t| t != 255));
        let got = weighted_cross_entropy(&logits, &targets, &[1.0, 1.0]).unwrap();
        prop_assert!((got - scalar_ce(&logits, &targets, &[1.0, 1.0])).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_class_ignores_its_logits(seed in any::<u64>(), k in 0u8..2) {
        let mut r = common::rng(seed);
        let logits = rand_tensor(&mut r, &[1, 2, 3, 4], 4.0);
        let targets: Vec<u8> = (0..12).map(|_| r.gen_range(0..2)).collect();
        let mut w = [1.3, 0.7];
        w[k as usize] = 0.0;
        let mut other = logits.clone();
        for (p, &t) in targets.iter().enumerate() {
            if t == k {
                for c in 0..2 {
                    other.data_mut()[c * 12 + p] = r.gen_range(-9.0..9.0);
                }
            }
        }
        let a = weighted_cross_entropy(&logits, &targets, &w).unwrap();
        let b = weighted_cross_entropy(&other, &targets, &w).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn class_weights_scale_invariant(a in 1u64..100_000, b in 1u64..100_000, s in 2u64..50) {
        let w = compute_class_weights(&stats(a, b)).unwrap();
        let ws = compute_class_weights(&stats(a * s, b * s)).unwrap();
        prop_assert!((w[0] - ws[0]).abs() < 1e-12 * w[0].max(1.0));
        prop_assert!((w[1] - ws[1]).abs() < 1e-12 * w[1].max(1.0));
        // frequency-weighted mean is one
        let mean = (a as f64 * w[0] + b as f64 * w[1]) / (a + b) as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
    }
}
