//! Scalar losses: averaged pixel cross-entropy, augmentation consistency,
//! smoothed dice, and the per-sample weighted objective.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result, WacError};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default smoothing added to both numerator and denominator of the dice coefficient.
pub const DEFAULT_DICE_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMetric {
    /// `‖z1 − z2‖₂`, with the zero subgradient where the latents coincide.
    #[default]
    Euclidean,
    /// `‖z1 − z2‖₂²`, smooth everywhere.
    SquaredEuclidean,
}

/// The `(ℓ_CE, ℓ_AC)` pair of one sample at one parameter value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossPair {
    pub ce: f64,
    pub ac: f64,
}

impl LossPair {
    pub fn new(ce: f64, ac: f64) -> Self {
        Self { ce, ac }
    }

    pub fn max(&self) -> f64 {
        self.ce.max(self.ac)
    }
}

fn check_labels(y: &[usize], num_classes: usize) -> Result<()> {
    for (pixel, &label) in y.iter().enumerate() {
        if label >= num_classes {
            return Err(WacError::LabelOutOfRange {
                pixel,
                label,
                classes: num_classes,
            });
        }
    }
    Ok(())
}

/// `−(1/d) Σ_j log max(p[j, y_j], PROB_FLOOR)` over a row-major `d × K` matrix.
pub fn cross_entropy(probs: &[f64], y: &[usize], num_classes: usize) -> Result<f64> {
    if num_classes == 0 {
        return invalid("cross_entropy needs at least one class");
    }
    check_len("cross_entropy probs", y.len() * num_classes, probs.len())?;
    check_labels(y, num_classes)?;
    if y.is_empty() {
        return invalid("cross_entropy on an empty image");
    }
    let total: f64 = y
        .iter()
        .enumerate()
        .map(|(j, &k)| -probs[j * num_classes + k].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / y.len() as f64)
}

/// `λ · ϱ(z1, z2)`.
pub fn consistency(
    z1: &[f64],
    z2: &[f64],
    lambda_ac: f64,
    metric: ConsistencyMetric,
) -> Result<f64> {
    check_len("consistency latents", z1.len(), z2.len())?;
    if !(lambda_ac >= 0.0) {
        return invalid(format!("lambda_ac must be >= 0, got {lambda_ac}"));
    }
    let sq: f64 = z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(match metric {
        ConsistencyMetric::Euclidean => lambda_ac * sq.sqrt(),
        ConsistencyMetric::SquaredEuclidean => lambda_ac * sq,
    })
}

/// Smoothed dice coefficient `(2 p·q + ε) / (‖p‖₁ + ‖q‖₁ + ε)` for `p ∈ [0,1]^d`, `q ∈ {0,1}^d`.
pub fn dice_coefficient(p: &[f64], q: &[f64], epsilon: f64) -> f64 {
    let inter: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let p1: f64 = p.iter().map(|v| v.abs()).sum();
    let q1: f64 = q.iter().map(|v| v.abs()).sum();
    let den = p1 + q1 + epsilon;
    if den == 0.0 {
        // ε = 0 with both vectors empty: the smoothed limit is 1.
        return 1.0;
    }
    (2.0 * inter + epsilon) / den
}

/// `1 − (1/K) Σ_k DSC_ε(p[:, k], 1{y = k})`.
pub fn dice_loss(probs: &[f64], y: &[usize], epsilon: f64, num_classes: usize) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return invalid(format!("dice epsilon must be >= 0, got {epsilon}"));
    }
    if num_classes == 0 {
        return invalid("dice_loss needs at least one class");
    }
    check_len("dice_loss probs", y.len() * num_classes, probs.len())?;
    check_labels(y, num_classes)?;
    let d = y.len();
    let mut total = 0.0;
    let mut p = vec![0.0; d];
    let mut q = vec![0.0; d];
    for k in 0..num_classes {
        for j in 0..d {
            p[j] = probs[j * num_classes + k];
            q[j] = if y[j] == k { 1.0 } else { 0.0 };
        }
        total += dice_coefficient(&p, &q, epsilon);
    }
    Ok(1.0 - total / num_classes as f64)
}

/// `β_i · ℓ_CE + (1 − β_i) · ℓ_AC`.
pub fn wac_sample_objective(beta_i: f64, losses: LossPair) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta_i) {
        return invalid(format!("beta must lie in [0, 1], got {beta_i}"));
    }
    Ok(beta_i * losses.ce + (1.0 - beta_i) * losses.ac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_has_zero_ce() {
        let probs = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(cross_entropy(&probs, &[0, 1], 2).unwrap(), 0.0);
    }

    #[test]
    fn ce_hand_value() {
        let probs = [0.5, 0.5, 0.25, 0.75];
        let ce = cross_entropy(&probs, &[0, 1], 2).unwrap();
        // −(ln 0.5 + ln 0.75)/2
        assert!((ce - 0.490_414_626_505_863_4).abs() < 1e-12, "{ce}");
    }

    #[test]
    fn uniform_probs_give_ln_k() {
        let k = 5;
        let d = 7;
        let probs = vec![1.0 / k as f64; d * k];
        let y: Vec<usize> = (0..d).map(|j| j % k).collect();
        let ce = cross_entropy(&probs, &y, k).unwrap();
        assert!((ce - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_bad_label() {
        let probs = [0.5, 0.5];
        assert!(matches!(
            cross_entropy(&probs, &[2], 2),
            Err(WacError::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn consistency_values() {
        let z = [1.0, -2.0];
        assert_eq!(consistency(&z, &z, 3.0, ConsistencyMetric::Euclidean).unwrap(), 0.0);
        assert_eq!(
            consistency(&[3.0, 4.0], &[0.0, 0.0], 0.0, ConsistencyMetric::Euclidean).unwrap(),
            0.0
        );
        assert_eq!(
            consistency(&[3.0, 4.0], &[0.0, 0.0], 2.0, ConsistencyMetric::Euclidean).unwrap(),
            10.0
        );
        assert_eq!(
            consistency(&[3.0, 4.0], &[0.0, 0.0], 2.0, ConsistencyMetric::SquaredEuclidean)
                .unwrap(),
            50.0
        );
        assert!(consistency(&[1.0], &[1.0, 2.0], 1.0, ConsistencyMetric::Euclidean).is_err());
    }

    #[test]
    fn dice_hand_value_without_smoothing() {
        let probs = [1.0, 0.0, 1.0, 0.0];
        let loss = dice_loss(&probs, &[0, 1], 0.0, 2).unwrap();
        assert!((loss - 2.0 / 3.0).abs() < 1e-15, "{loss}");
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let probs = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let y = [0, 1, 0];
        let perfect = dice_loss(&probs, &y, DEFAULT_DICE_EPSILON, 2).unwrap();
        assert!(perfect.abs() < 1e-12);
        let wrong = [0, 1, 0];
        let probs_wrong = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let loss = dice_loss(&probs_wrong, &wrong, DEFAULT_DICE_EPSILON, 2).unwrap();
        assert!(loss > 1.0 - 1e-4 && loss <= 1.0, "{loss}");
    }

    #[test]
    fn wac_objective_endpoints() {
        let pair = LossPair::new(2.0, 4.0);
        assert_eq!(wac_sample_objective(1.0, pair).unwrap(), 2.0);
        assert_eq!(wac_sample_objective(0.0, pair).unwrap(), 4.0);
        assert_eq!(wac_sample_objective(0.5, pair).unwrap(), 3.0);
        assert!(wac_sample_objective(1.5, pair).is_err());
    }

    fn probs_strategy(d: usize, k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (
            prop::collection::vec(0.01f64..1.0, d * k),
            prop::collection::vec(0..k, d),
        )
            .prop_map(move |(raw, y)| {
                let mut probs = raw;
                for row in probs.chunks_mut(k) {
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                (probs, y)
            })
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative_and_dice_bounded((probs, y) in probs_strategy(6, 3), eps in 0.0f64..1.0) {
            prop_assert!(cross_entropy(&probs, &y, 3).unwrap() >= 0.0);
            let dl = dice_loss(&probs, &y, eps, 3).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&dl));
        }

        #[test]
        fn consistency_is_symmetric(z1 in prop::collection::vec(-5.0f64..5.0, 4),
                                    z2 in prop::collection::vec(-5.0f64..5.0, 4),
                                    lam in 0.0f64..3.0) {
            for metric in [ConsistencyMetric::Euclidean, ConsistencyMetric::SquaredEuclidean] {
                let a = consistency(&z1, &z2, lam, metric).unwrap();
                let b = consistency(&z2, &z1, lam, metric).unwrap();
                prop_assert_eq!(a, b);
                prop_assert!(a >= 0.0);
            }
        }

        #[test]
        fn wac_objective_is_affine_in_beta(ce in 0.0f64..10.0, ac in 0.0f64..10.0,
                                          b1 in 0.0f64..=1.0, b2 in 0.0f64..=1.0, t in 0.0f64..=1.0) {
            let pair = LossPair::new(ce, ac);
            let mid = t * b1 + (1.0 - t) * b2;
            let lhs = wac_sample_objective(mid, pair).unwrap();
            let rhs = t * wac_sample_objective(b1, pair).unwrap()
                + (1.0 - t) * wac_sample_objective(b2, pair).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + ce + ac));
        }

        #[test]
        fn plain_objective_is_twice_half_weight(ce in 0.0f64..10.0, ac in 0.0f64..10.0) {
            let pair = LossPair::new(ce, ac);
            let half = wac_sample_objective(0.5, pair).unwrap();
            prop_assert!((ce + ac - 2.0 * half).abs() <= 1e-12 * (1.0 + ce + ac));
        }
    }
}
