mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sts_core::data_io::metrics;
use sts_core::multitask::{classification_loss, count_head, exposure_head, regression_loss, threshold_mask, DEFAULT_ETA};
use sts_core::*;

fn t(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec()).unwrap()
}

#[test]
fn bucketed_regression_loss_on_mixed_batch() {
    let mut tape = Tape::new();
    let pred = tape.constant(t(&[0.2, 0.5, 4.0]));
    let l = regression_loss(&mut tape, &t(&[0.0, 1.0, 5.0]), pred, &DEFAULT_ETA).unwrap();
    assert!((tape.value(l).item() - 0.552).abs() < 1e-12);
}

#[test]
fn classification_loss_matches_cross_entropy_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let truth: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { rng.random_range(1..5) as f64 } else { 0.0 }).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let mut expected = 0.0;
        for (y, q) in truth.iter().zip(&p) {
            expected -= if *y > 0.0 { q.ln() } else { (1.0 - q).ln() };
        }
        let mut tape = Tape::new();
        let pv = tape.constant(t(&p));
        let l = classification_loss(&mut tape, &t(&truth), pv).unwrap();
        assert!((tape.value(l).item() - expected).abs() < 1e-10);
    }
}

#[test]
fn masked_predictions_are_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let (b, n, c, d) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..6));
        let mut rand_t = |shape: &[usize], scale: f64| {
            let len = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
        };
        let e = rand_t(&[b, n, c, d], 3.0);
        let we = rand_t(&[c, d], 1.0);
        let wc = rand_t(&[c, d], 1e6);
        let mut tape = Tape::new();
        let (ev, wev, wcv) = (tape.constant(e.clone()), tape.constant(we.clone()), tape.constant(wc.clone()));
        let p = exposure_head(&mut tape, ev, wev).unwrap();
        let z = threshold_mask(tape.value(p), 0.5);
        let x = count_head(&mut tape, ev, &z, wcv).unwrap();
        for (k, (&open, &v)) in z.iter().zip(tape.value(x).data()).enumerate() {
            let (cat, base) = (k % c, k * d);
            let logit: f64 = (0..d).map(|j| we.data()[cat * d + j] * e.data()[base + j]).sum();
            assert_eq!(open, common::sigmoid(logit) >= 0.5);
            if !open {
                assert_eq!(v.to_bits(), 0.0f64.to_bits());
            }
        }
    }
}

#[test]
fn metrics_hand_case() {
    let m = metrics(&t(&[0.0, 2.0]), &t(&[0.0, 1.0])).unwrap();
    let r = |v: f64| (v * 1e4).round() / 1e4;
    assert_eq!(r(m.mae), 0.5);
    assert_eq!(r(m.rmse), 0.7071);
    assert_eq!(r(m.mae_star.unwrap()), 1.0);
    assert_eq!(r(m.rmse_star.unwrap()), 1.0);
}

proptest! {
    #[test]
    fn rmse_dominates_mae(
        pairs in prop::collection::vec((prop_oneof![Just(0.0), 0.0f64..20.0], 0.0f64..20.0), 1..60)
    ) {
        let (truth, pred): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = metrics(&t(&truth), &t(&pred)).unwrap();
        prop_assert!(m.rmse >= m.mae);
        if let (Some(r), Some(a)) = (m.rmse_star, m.mae_star) {
            prop_assert!(r >= a);
        }
        let mae: f64 = truth.iter().zip(&pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len() as f64;
        prop_assert!((m.mae - mae).abs() < 1e-12);
    }
}
