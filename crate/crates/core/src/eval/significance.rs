//! Paired approximate randomization test on the macro-F1 difference.
//!
//! Each resample swaps the two systems' predictions on every example
//! independently with probability ½. The two-sided p-value is
//! `(1 + #{|Δ_resample| ≥ |Δ_observed|}) / (1 + R)`. With `m` comparisons the
//! result is significant when `p ≤ 0.05 / m`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::macro_f1;
use crate::error::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 10_000;
const ALPHA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    /// `macro_F1(a) − macro_F1(b)`.
    pub observed_diff: f64,
    pub p_value: f64,
    /// Bonferroni-corrected threshold `0.05 / m`.
    pub threshold: f64,
    pub significant: bool,
}

/// Tests whether systems `a` and `b` differ in macro-F1 on `golds`.
#[allow(clippy::too_many_arguments)]
pub fn significance(
    preds_a: &[usize],
    preds_b: &[usize],
    golds: &[usize],
    classes: usize,
    num_resamples: usize,
    num_comparisons: usize,
    seed: u64,
) -> Result<SignificanceResult> {
    if preds_a.len() != golds.len() || preds_b.len() != golds.len() {
        return Err(Error::Input(format!(
            "prediction lengths {} and {} do not match {} gold labels",
            preds_a.len(),
            preds_b.len(),
            golds.len()
        )));
    }
    if golds.is_empty() || num_resamples == 0 || num_comparisons == 0 {
        return Err(Error::Input(
            "significance needs examples, resamples and at least one comparison".into(),
        ));
    }
    if let Some(&bad) = golds.iter().chain(preds_a).chain(preds_b).find(|&&l| l >= classes) {
        return Err(Error::Label {
            index: 0,
            label: bad as i64,
            classes,
        });
    }
    let observed = macro_f1(golds, preds_a, classes) - macro_f1(golds, preds_b, classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = preds_a.to_vec();
    let mut y = preds_b.to_vec();
    let mut hits = 0usize;
    // Guards against counting differences that only exist through rounding.
    let tol = 1e-12;
    for _ in 0..num_resamples {
        for i in 0..golds.len() {
            if rng.random::<bool>() {
                x[i] = preds_b[i];
                y[i] = preds_a[i];
            } else {
                x[i] = preds_a[i];
                y[i] = preds_b[i];
            }
        }
        let d = macro_f1(golds, &x, classes) - macro_f1(golds, &y, classes);
        if d.abs() >= observed.abs() - tol {
            hits += 1;
        }
    }
    let p_value = (hits + 1) as f64 / (num_resamples + 1) as f64;
    let threshold = ALPHA / num_comparisons as f64;
    Ok(SignificanceResult {
        observed_diff: observed,
        p_value,
        threshold,
        significant: p_value <= threshold,
    })
}

/// Bonferroni decision for an already computed p-value.
pub fn bonferroni_significant(p_value: f64, num_comparisons: usize) -> bool {
    p_value <= ALPHA / num_comparisons.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_predictions_give_p_one() {
        let g = [0, 1, 1, 0, 1];
        let p = [0, 1, 0, 0, 1];
        let r = significance(&p, &p, &g, 2, 500, 1, 0).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(!r.significant);
    }

    #[test]
    fn bonferroni_arithmetic() {
        assert!(bonferroni_significant(0.03, 1));
        assert!(!bonferroni_significant(0.03, 20));
        assert!(bonferroni_significant(0.0025, 20));
    }

    #[test]
    fn swapping_systems_keeps_p() {
        let g: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let a: Vec<usize> = (0..60).map(|i| if i % 4 == 0 { (i + 1) % 3 } else { i % 3 }).collect();
        let b: Vec<usize> = (0..60).map(|i| if i % 5 == 0 { 0 } else { i % 3 }).collect();
        let ab = significance(&a, &b, &g, 3, 300, 1, 5).unwrap();
        let ba = significance(&b, &a, &g, 3, 300, 1, 5).unwrap();
        assert_eq!(ab.p_value, ba.p_value);
        assert_eq!(ab.observed_diff, -ba.observed_diff);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(significance(&[0], &[0, 1], &[0, 1], 2, 10, 1, 0), Err(Error::Input(_))));
    }
}
