//! RMSE and the asymmetric PHM score over per-engine final RUL estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Late-prediction scale of the PHM score (over-estimates).
pub const SCORE_LATE: f64 = 10.0;
/// Early-prediction scale of the PHM score (under-estimates).
pub const SCORE_EARLY: f64 = 13.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub predicted: f64,
    pub truth: f64,
}

impl EvalPair {
    pub fn new(predicted: f64, truth: f64) -> Result<Self> {
        if !(truth >= 0.0) {
            return Err(Error::invalid(format!("true RUL must be non-negative, got {truth}")));
        }
        Ok(Self { predicted, truth })
    }

    /// `predicted - truth`; positive means the estimate is late.
    pub fn diff(&self) -> f64 {
        self.predicted - self.truth
    }
}

pub fn rmse(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("rmse of an empty set"));
    }
    let sse: f64 = pairs.iter().map(|p| p.diff() * p.diff()).sum();
    Ok((sse / pairs.len() as f64).sqrt())
}

/// Penalty for a single engine.
pub fn engine_score(diff: f64) -> f64 {
    if diff < 0.0 {
        (-diff / SCORE_EARLY).exp() - 1.0
    } else {
        (diff / SCORE_LATE).exp() - 1.0
    }
}

pub fn phm_score(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("score of an empty set"));
    }
    Ok(pairs.iter().map(|p| engine_score(p.diff())).sum())
}

/// Mean and sample standard deviation (n - 1 denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs_from_diffs(diffs: &[f64]) -> Vec<EvalPair> {
        diffs.iter().map(|&d| EvalPair::new(50.0 + d, 50.0).unwrap()).collect()
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&pairs_from_diffs(&[0.0, 0.0])).unwrap(), 0.0);
        assert!((rmse(&pairs_from_diffs(&[3.0, 3.0, -3.0])).unwrap() - 3.0).abs() < 1e-12);
        assert!((rmse(&pairs_from_diffs(&[3.0, -4.0])).unwrap() - 3.535_533_905_932_737_6).abs() < 1e-12);
    }

    #[test]
    fn score_examples() {
        let e1 = std::f64::consts::E - 1.0;
        assert_eq!(phm_score(&pairs_from_diffs(&[0.0])).unwrap(), 0.0);
        assert!((phm_score(&pairs_from_diffs(&[10.0])).unwrap() - e1).abs() < 1e-12);
        assert!((phm_score(&pairs_from_diffs(&[-13.0])).unwrap() - e1).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_error() {
        assert!(rmse(&[]).is_err());
        assert!(phm_score(&[]).is_err());
        assert!(EvalPair::new(1.0, -1.0).is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[10.0, 11.0, 12.0, 13.0, 14.0]);
        assert_eq!(m, 12.0);
        assert!((s - 1.581_138_830_084_189_8).abs() < 1e-12);
        assert_eq!(mean_std(&[3.0, 3.0, 3.0]).1, 0.0);
    }

    proptest! {
        #[test]
        fn late_costs_more_than_early(d in 1e-6f64..200.0) {
            prop_assert!(engine_score(d) > engine_score(-d));
        }

        #[test]
        fn score_is_additive(a in proptest::collection::vec(-60.0f64..60.0, 1..20),
                             b in proptest::collection::vec(-60.0f64..60.0, 1..20)) {
            let (pa, pb) = (pairs_from_diffs(&a), pairs_from_diffs(&b));
            let joined: Vec<EvalPair> = pa.iter().chain(&pb).copied().collect();
            let lhs = phm_score(&joined).unwrap();
            let rhs = phm_score(&pa).unwrap() + phm_score(&pb).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
        }

        #[test]
        fn permutation_invariant(mut d in proptest::collection::vec(-60.0f64..60.0, 2..30)) {
            let before = (rmse(&pairs_from_diffs(&d)).unwrap(), phm_score(&pairs_from_diffs(&d)).unwrap());
            d.reverse();
            d.rotate_left(1);
            let after = (rmse(&pairs_from_diffs(&d)).unwrap(), phm_score(&pairs_from_diffs(&d)).unwrap());
            prop_assert!((before.0 - after.0).abs() < 1e-9);
            prop_assert!((before.1 - after.1).abs() < 1e-9 * before.1.max(1.0));
        }
    }
}
