//! Regression metrics: R², adjusted R², RMSE, best-fit slope, and the
//! slope ≤ 1 biophysical check.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack on the slope ≤ 1 boundary.
pub const SLOPE_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} truth vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} samples, have {have}")]
    TooFew { need: usize, have: usize },
    #[error("ground truth is constant")]
    ConstantTruth,
    #[error("adjusted R² needs samples > features + 1 (p = {p}, q = {q})")]
    TooFewSamples { p: usize, q: usize },
}

fn check(y_true: &[f64], y_pred: &[f64], min: usize) -> Result<(), MetricError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.len() < min {
        return Err(MetricError::TooFew {
            need: min,
            have: y_true.len(),
        });
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Coefficient of determination, `1 - SS_res / SS_tot`. May be negative.
pub fn r2(y_true: &[f64], y_pred: &[f64]) -> Result<f64, MetricError> {
    check(y_true, y_pred, 2)?;
    let m = mean(y_true);
    let ss_tot: f64 = y_true.iter().map(|y| (y - m).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ConstantTruth);
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// `1 - (1 - r2)(p - 1) / (p - q - 1)` for `p` samples and `q` features.
pub fn adjusted_r2(r2: f64, p: usize, q: usize) -> Result<f64, MetricError> {
    if p <= q + 1 {
        return Err(MetricError::TooFewSamples { p, q });
    }
    if q == 0 {
        return Ok(r2);
    }
    Ok(1.0 - (1.0 - r2) * (p - 1) as f64 / (p - q - 1) as f64)
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64, MetricError> {
    check(y_true, y_pred, 1)?;
    let mse = y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p).powi(2))
        .sum::<f64>()
        / y_true.len() as f64;
    Ok(mse.sqrt())
}

/// OLS of predictions on ground truth: `y_pred ≈ m * y_true + b`. Returns `(m, b)`.
pub fn best_fit_slope(y_true: &[f64], y_pred: &[f64]) -> Result<(f64, f64), MetricError> {
    check(y_true, y_pred, 2)?;
    let (mt, mp) = (mean(y_true), mean(y_pred));
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (t, p) in y_true.iter().zip(y_pred) {
        sxx += (t - mt) * (t - mt);
        sxy += (t - mt) * (p - mp);
    }
    if sxx == 0.0 {
        return Err(MetricError::ConstantTruth);
    }
    let m = sxy / sxx;
    Ok((m, mp - m * mt))
}

/// True when the slope breaks the `m ≤ 1` constraint.
pub fn check_slope_constraint(m: f64) -> bool {
    m > 1.0 + SLOPE_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r2: f64,
    /// Absent when `n_samples <= n_features + 1`.
    pub adj_r2: Option<f64>,
    pub rmse: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n_samples: usize,
    pub n_features: usize,
    pub slope_violation: bool,
}

impl MetricReport {
    pub fn compute(y_true: &[f64], y_pred: &[f64], n_features: usize) -> Result<Self, MetricError> {
        let r2 = r2(y_true, y_pred)?;
        let (slope, intercept) = best_fit_slope(y_true, y_pred)?;
        Ok(Self {
            r2,
            adj_r2: adjusted_r2(r2, y_true.len(), n_features).ok(),
            rmse: rmse(y_true, y_pred)?,
            slope,
            intercept,
            n_samples: y_true.len(),
            n_features,
            slope_violation: check_slope_constraint(slope),
        })
    }

    /// Field-wise arithmetic mean. The violation flag is re-derived from the mean slope.
    pub fn mean_of(reports: &[MetricReport]) -> Option<Self> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let adj: Option<Vec<f64>> = reports.iter().map(|r| r.adj_r2).collect();
        let slope = avg(|r| r.slope);
        Some(Self {
            r2: avg(|r| r.r2),
            adj_r2: adj.map(|a| a.iter().sum::<f64>() / n),
            rmse: avg(|r| r.rmse),
            slope,
            intercept: avg(|r| r.intercept),
            n_samples: first.n_samples,
            n_features: first.n_features,
            slope_violation: check_slope_constraint(slope),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn r2_cases() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
        assert_eq!(r2(&y, &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r2(&y, &[1.0, 2.0, 4.0]).unwrap(), 0.5);
        assert_eq!(r2(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricError::ConstantTruth));
        assert!(r2(&y, &[1.0]).is_err());
    }

    #[test]
    fn adjusted_cases() {
        assert_eq!(adjusted_r2(1.0, 20, 5).unwrap(), 1.0);
        assert_eq!(adjusted_r2(0.37, 20, 0).unwrap(), 0.37);
        assert!((adjusted_r2(0.5, 11, 4).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(adjusted_r2(0.5, 5, 4), Err(MetricError::TooFewSamples { p: 5, q: 4 }));
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 12.5f64.sqrt());
        assert_eq!(rmse(&[0.0], &[2.0]).unwrap(), 2.0);
    }

    #[test]
    fn slope_cases() {
        let y = [0.0, 1.0, 2.0];
        assert_eq!(best_fit_slope(&y, &y).unwrap(), (1.0, 0.0));
        assert_eq!(best_fit_slope(&y, &[0.0, 2.0, 4.0]).unwrap(), (2.0, 0.0));
        assert_eq!(best_fit_slope(&y, &[3.0, 4.0, 5.0]).unwrap(), (1.0, 3.0));
    }

    #[test]
    fn slope_boundary() {
        assert!(!check_slope_constraint(0.95));
        assert!(check_slope_constraint(2.0));
        assert!(!check_slope_constraint(1.0));
    }

    #[test]
    fn mean_of_reports() {
        let a = MetricReport::compute(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 3.0], 1).unwrap();
        let b = MetricReport::compute(&[0.0, 1.0, 2.0, 3.0], &[0.0, 2.0, 4.0, 6.0], 1).unwrap();
        let m = MetricReport::mean_of(&[a, b]).unwrap();
        assert_eq!(m.slope, 1.5);
        assert!(m.slope_violation);
        assert!(MetricReport::mean_of(&[]).is_none());
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (3usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-100.0f64..100.0, n),
                prop::collection::vec(-100.0f64..100.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn r2_permutation_invariant((t, p) in vec_pair(), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let tp: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let a = r2(&t, &p).unwrap();
            let b = r2(&tp, &pp).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn adjusted_decreasing_in_q(r in -2.0f64..0.999, p in 10usize..200) {
            let mut prev = adjusted_r2(r, p, 0).unwrap();
            for q in 1..(p - 2).min(20) {
                let cur = adjusted_r2(r, p, q).unwrap();
                prop_assert!(cur < prev);
                prev = cur;
            }
        }

        #[test]
        fn slope_offset_invariant((t, p) in vec_pair(), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = p.iter().map(|x| x + c).collect();
            let (m1, _) = best_fit_slope(&t, &p).unwrap();
            let (m2, _) = best_fit_slope(&t, &shifted).unwrap();
            prop_assert!((m1 - m2).abs() <= 1e-9 * (1.0 + m1.abs()));
        }

        #[test]
        fn rmse_triangle((a, b) in vec_pair(), shift in -10.0f64..10.0) {
            let c: Vec<f64> = b.iter().map(|x| x * 0.5 + shift).collect();
            let ac = rmse(&a, &c).unwrap();
            let ab = rmse(&a, &b).unwrap();
            let bc = rmse(&b, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn adjusted_not_above_r2((t, p) in vec_pair()) {
            let rep = MetricReport::compute(&t, &p, 1);
            if let Ok(rep) = rep {
                if let Some(adj) = rep.adj_r2 {
                    prop_assert!(adj <= rep.r2 + 1e-12);
                }
            }
        }
    }
}
