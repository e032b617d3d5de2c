use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uwloc_core::agc::{agc_backward, agc_forward, energy};
use uwloc_core::AgcParams;

fn loss(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(a, b)| a * b).sum()
}

#[test]
fn backward_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(alpha, scale) in &[(0.2, 1.0), (0.2, 0.1), (0.7, 3.0), (1.0, 0.5)] {
        let p = AgcParams {
            alpha,
            ..AgcParams::default()
        };
        let x: Vec<f64> = (0..50).map(|_| rng.gen_range(-scale..scale)).collect();
        let w: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = agc_backward(&x, &p, &w).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&agc_forward(&xp, &p).unwrap().0, &w) - loss(&agc_forward(&xm, &p).unwrap().0, &w))
                / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-5, "alpha {alpha} i {i}: {fd} vs {}", grad[i]);
        }
    }
}

#[test]
fn f32_and_f64_agree() {
    let x64: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin() * 2.0).collect();
    let x32: Vec<f32> = x64.iter().map(|&v| v as f32).collect();
    let p = AgcParams::default();
    let (y64, g64) = agc_forward(&x64, &p).unwrap();
    let (y32, g32) = agc_forward(&x32, &p).unwrap();
    assert!((g64 - g32 as f64).abs() < 1e-6);
    for (a, b) in y64.iter().zip(&y32) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}

#[test]
fn hand_case_and_gain_floor() {
    let p = AgcParams::default();
    let (y, g) = agc_forward(&[3.0f64, 0.0, 0.0, 0.0], &p).unwrap();
    // E = 9/4, g = 1 + 0.2·(4/9 − 1)
    assert!((g - 0.888889).abs() < 1e-6);
    assert!((y[0] - 3.0 * g).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.gen_range(1..64);
        let scale = 10f64.powf(rng.gen_range(-4.0..4.0));
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let (_, g) = agc_forward(&x, &p).unwrap();
        assert!(g > 1.0 - p.alpha);
        let e = energy(&x).unwrap();
        if e + p.epsilon < p.e_target {
            assert!(g > 1.0);
        } else if e + p.epsilon > p.e_target {
            assert!(g < 1.0);
        }
    }
}

#[test]
fn empty_tensor_rejected() {
    assert!(agc_forward::<f64>(&[], &AgcParams::default()).is_err());
}

proptest! {
    #[test]
    fn gain_matches_the_closed_form(
        xs in prop::collection::vec(-5.0f64..5.0, 1..200),
        alpha in 0.0f64..1.0,
    ) {
        let p = AgcParams { alpha, ..AgcParams::default() };
        let (y, g) = agc_forward(&xs, &p).unwrap();
        let e = xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64;
        let want = 1.0 + alpha * (1.0 / (e + 1e-6) - 1.0);
        prop_assert!((g - want).abs() <= 1e-12 * want.abs().max(1.0));
        for (a, b) in y.iter().zip(&xs) {
            prop_assert!((a - g * b).abs() <= 1e-12 * (g * b).abs().max(1e-300));
        }
    }

    #[test]
    fn gain_direction_follows_energy(
        xs in prop::collection::vec(-3.0f64..3.0, 8..200),
        alpha in 0.01f64..0.5,
    ) {
        let p = AgcParams { alpha, ..AgcParams::default() };
        let e_in = energy(&xs).unwrap();
        let (y, g) = agc_forward(&xs, &p).unwrap();
        prop_assert_eq!(g > 1.0, e_in + 1e-6 < 1.0);
        if e_in > 1.0 {
            // attenuation never overshoots the target while α ≤ 1/2
            let e_out = energy(&y).unwrap();
            prop_assert!(e_out <= e_in && e_out >= 1.0 - 1e-5, "{} -> {}", e_in, e_out);
        }
    }
}
