mod common;

use common::{random_pairs, shape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uwloc_core::learn::{
    assign_folds, evaluate, finetune, mae, mean_baseline, mse, pcl5, predict, sample_subset, scratch_on_fraction,
    split, train, FoldScheme, MetricsReport,
};
use uwloc_core::net::build_model;
use uwloc_core::{FeaturePair, Hyper, NetConfig, NetParams};

fn tiny_model() -> NetParams {
    build_model(&NetConfig::micro().with_input(shape(2, 1, 8, 8))).unwrap()
}

fn data(n: usize, seed: u64) -> Vec<FeaturePair> {
    random_pairs(n, shape(2, 1, 8, 8), seed)
}

fn refs(v: &[FeaturePair]) -> Vec<&FeaturePair> {
    v.iter().collect()
}

fn quick(epochs: usize) -> Hyper {
    Hyper {
        batch_size: 8,
        lr: 1e-3,
        epochs,
        ..Hyper::default()
    }
}

#[test]
fn metrics_agree_with_a_second_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..10.0)).collect();
        let yhat: Vec<f64> = y.iter().map(|v| v + rng.gen_range(-1.0..1.0) * v * 0.1).collect();
        let (mut abs, mut sq, mut hits) = (0.0, 0.0, 0usize);
        for i in 0..n {
            let d = y[i] - yhat[i];
            abs += d.abs();
            sq += d * d;
            if d.abs() <= 0.05 * y[i] {
                hits += 1;
            }
        }
        let n = n as f64;
        assert!((mae(&y, &yhat).unwrap() - abs / n).abs() <= 1e-12 * (abs / n).max(1.0));
        assert!((mse(&y, &yhat).unwrap() - sq / n).abs() <= 1e-12 * (sq / n).max(1.0));
        assert!((pcl5(&y, &yhat).unwrap() - 100.0 * hits as f64 / n).abs() <= 1e-12);
    }
}

#[test]
fn boundary_and_errors() {
    assert_eq!(pcl5(&[2.0], &[2.1]).unwrap(), 100.0);
    assert_eq!(pcl5(&[20.0, 20.0], &[21.0, 19.0]).unwrap(), 100.0);
    assert_eq!(pcl5(&[2.0], &[2.1001]).unwrap(), 0.0);
    assert_eq!(pcl5(&[4.0, 4.0], &[4.0, 4.5]).unwrap(), 50.0);
    assert!(pcl5(&[0.0], &[0.0]).is_err());
    assert!(mae(&[], &[]).is_err());
    assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn fold_assignment_interleaves_six_folds() {
    let folds = assign_folds(4500).unwrap();
    assert_eq!(folds[6], 0);
    assert_eq!(folds[4499], 4499 % 6);
    for f in 0..6 {
        assert_eq!(folds.iter().filter(|&&x| x == f).count(), 750);
    }
    let s = split(3900, &FoldScheme::default()).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2600, 650, 650));
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let init = tiny_model();
    let d = data(24, 1);
    let h = Hyper {
        lr: 0.0,
        ..quick(2)
    };
    let out = train(init.clone(), &refs(&d[..16]), &refs(&d[16..]), &h, None).unwrap();
    assert_eq!(out.best.params, init.params);
    assert_eq!(out.history.len(), 2);
}

#[test]
fn training_is_reproducible() {
    let d = data(40, 2);
    let run = || {
        let out = train(tiny_model(), &refs(&d[..32]), &refs(&d[32..]), &quick(3), None).unwrap();
        (out.best, out.history)
    };
    assert_eq!(run(), run());
}

#[test]
fn training_reduces_loss_on_a_learnable_target() {
    let d = data(96, 4);
    let h = Hyper {
        lr: 3e-3,
        ..quick(15)
    };
    let out = train(tiny_model(), &refs(&d[..64]), &refs(&d[64..]), &h, None).unwrap();
    let first = out.history[0].train_mse;
    let last = out.history.last().unwrap().train_mse;
    assert!(last < 0.5 * first, "{first} -> {last}");
    let best_val = out.history.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
    assert_eq!(out.history[out.best_epoch - 1].val_mse, best_val);
}

#[test]
fn evaluate_reports_consistent_metrics() {
    let d = data(20, 5);
    let p = tiny_model();
    let r = evaluate(&p, &refs(&d), None).unwrap();
    assert!(r.is_consistent());
    let yhat = predict(&p, &refs(&d), None).unwrap();
    let y: Vec<f64> = d.iter().map(|s| s.range_km as f64).collect();
    assert_eq!(r.mae_km, mae(&y, &yhat).unwrap());
    assert_eq!(r.predictions.len(), 20);
    assert_eq!(r.predictions[7].0, d[7].index);
}

#[test]
fn mean_baseline_predicts_the_training_mean() {
    let d = data(30, 6);
    let r = mean_baseline(&refs(&d[..20]), &refs(&d[20..])).unwrap();
    let m = d[..20].iter().map(|s| s.range_km as f64).sum::<f64>() / 20.0;
    assert!(r.predictions.iter().all(|&(_, _, v)| (v - m).abs() < 1e-12));
    let json = serde_json::to_string(&r).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

#[test]
fn finetune_with_zero_fraction_is_the_pretrained_model() {
    let d = data(30, 7);
    let p = tiny_model();
    let out = finetune(&p, &refs(&d), 0.0, false, &quick(4), None).unwrap();
    assert_eq!(out.params, p);
    assert!(out.sampled.is_empty());
    assert_eq!(out.eval.len(), 30);
}

#[test]
fn finetune_fraction_rules() {
    let d = data(40, 8);
    let p = tiny_model();
    assert!(finetune(&p, &refs(&d), 0.2, false, &quick(4), None).is_err());
    let out = finetune(&p, &refs(&d), 0.2, true, &quick(4), None).unwrap();
    assert_eq!((out.sampled.len(), out.eval.len()), (8, 32));
    assert_eq!(out.history.len(), 1);
    assert_ne!(out.params.params, p.params);
    assert!(scratch_on_fraction(&p, &refs(&d), 0.0, false, &quick(4), None).is_err());
    let s = scratch_on_fraction(&p, &refs(&d), 0.3, false, &quick(4), None).unwrap();
    assert_eq!(s.sampled.len(), 12);
    assert_eq!(s.history.len(), 4);
}

#[test]
fn shape_mismatch_is_rejected() {
    let other = random_pairs(4, shape(3, 1, 8, 8), 0);
    assert!(predict(&tiny_model(), &refs(&other), None).is_err());
}

proptest! {
    #[test]
    fn subsets_partition_the_target(n in 0usize..500, f in 0.0f64..=1.0, seed in 0u64..50) {
        let (a, b) = sample_subset(n, f, seed).unwrap();
        prop_assert_eq!(a.len(), (f * n as f64 + 1e-9).floor() as usize);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(sample_subset(n, f, seed).unwrap().0, a);
    }

    #[test]
    fn larger_fractions_extend_smaller_ones(n in 1usize..400, a in 0.0f64..=1.0, b in 0.0f64..=1.0, seed in 0u64..50) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = sample_subset(n, lo, seed).unwrap().0;
        let large = sample_subset(n, hi, seed).unwrap().0;
        prop_assert!(small.iter().all(|i| large.binary_search(i).is_ok()));
    }

    #[test]
    fn mae_is_bounded_by_root_mse(y in prop::collection::vec(0.1f64..10.0, 1..50), shift in -2.0f64..2.0) {
        let yhat: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + shift * ((i % 3) as f64 - 1.0)).collect();
        let a = mae(&y, &yhat).unwrap();
        let m = mse(&y, &yhat).unwrap();
        prop_assert!(a * a <= m * (1.0 + 1e-12) + 1e-15);
    }
}
