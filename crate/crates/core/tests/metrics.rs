mod common;

use common::{brute_rmse, brute_score, rng};
use proptest::prelude::*;
use rand::Rng;
use rul_core::losses::{composite_loss, cosine, huber, mcosine, LossWeights};
use rul_core::metrics::{engine_score, mean_std, phm_score, rmse, EvalPair};

fn pairs(pred: &[f64], truth: &[f64]) -> Vec<EvalPair> {
    pred.iter().zip(truth).map(|(&p, &t)| EvalPair::new(p, t).unwrap()).collect()
}

#[test]
fn metrics_match_brute_force_on_random_sets() {
    let mut r = rng(1000);
    for _ in 0..1000 {
        let n = r.random_range(1..120);
        let truth: Vec<f64> = (0..n).map(|_| r.random_range(0.0..200.0)).collect();
        let pred: Vec<f64> = truth.iter().map(|t| t + r.random_range(-40.0..40.0)).collect();
        let p = pairs(&pred, &truth);
        let (a, b) = (rmse(&p).unwrap(), brute_rmse(&pred, &truth));
        assert!((a - b).abs() <= 1e-12 * b.max(1.0), "rmse {a} vs {b}");
        let (a, b) = (phm_score(&p).unwrap(), brute_score(&pred, &truth));
        assert!((a - b).abs() <= 1e-12 * b.max(1.0), "score {a} vs {b}");
    }
}

#[test]
fn late_predictions_cost_more_than_early_ones() {
    let mut r = rng(100);
    for _ in 0..100 {
        let d = r.random_range(0.01..60.0);
        assert!(engine_score(d) > engine_score(-d), "d = {d}");
    }
    assert_eq!(engine_score(0.0), 0.0);
}

#[test]
fn known_values() {
    let p = pairs(&[110.0, 90.0], &[100.0, 100.0]);
    assert!((rmse(&p).unwrap() - 10.0).abs() < 1e-12);
    let expected = (1.0f64).exp() - 1.0 + (10.0f64 / 13.0).exp() - 1.0;
    assert!((phm_score(&p).unwrap() - expected).abs() < 1e-12);
    let (m, s) = mean_std(&[11.0, 12.0, 13.0]);
    assert_eq!(m, 12.0);
    assert!((s - 1.0).abs() < 1e-12);
    assert!(rmse(&[]).is_err());
    assert!(EvalPair::new(1.0, -1.0).is_err());
}

#[test]
fn cosine_loss_extremes() {
    let a = vec![1.0, 2.0, 3.0];
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    let orth = vec![3.0, 0.0, -1.0];
    assert!((cosine(&a, &a, 1e-7) - 1.0).abs() < 1e-12);
    assert!((mcosine(&[a.clone(), a.clone()], 1e-7).unwrap() - 2.0).abs() < 1e-12);
    assert!(mcosine(&[a.clone(), orth], 1e-7).unwrap().abs() < 1e-12);
    assert!(mcosine(&[a.clone(), neg], 1e-7).unwrap().abs() < 1e-12);
    // Zero latents stay finite thanks to the denominator floor.
    assert!(mcosine(&[vec![0.0; 3], a.clone()], 1e-7).unwrap().is_finite());
    let w = LossWeights::default();
    let l = composite_loss(10.0, &[12.0, 9.0], &[a.clone(), a], 10.0, &w).unwrap();
    assert!((l - (0.0 + 0.3 * (1.5 + 0.5) + 2.0)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn huber_is_symmetric_and_bounded_by_quadratic(d in -500.0f64..500.0, beta in 0.1f64..5.0) {
        let h = huber(d, 0.0, beta);
        prop_assert!((h - huber(-d, 0.0, beta)).abs() < 1e-12);
        prop_assert!(h <= 0.5 * d * d + 1e-9);
        prop_assert!(h >= 0.0);
    }

    #[test]
    fn mcosine_stays_in_range(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let v = mcosine(&[a, b], 1e-7).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&v));
    }
}
