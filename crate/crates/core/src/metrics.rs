//! Evaluation: averaged RMSE, parameter error, inclusion rates, coverage.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datasets::FederatedDataset;
use crate::error::{ensure_dim, Error, Result};

pub fn rmse(pred: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    ensure_dim("rmse", truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::InvalidArgument("rmse of an empty vector".into()));
    }
    Ok(((pred - truth).norm_squared() / truth.len() as f64).sqrt())
}

/// Mean over `set` of per-device RMSE.
pub fn a_rmse(preds: &[DVector<f64>], truths: &[DVector<f64>], set: &[usize]) -> Result<f64> {
    ensure_dim("a-rmse devices", truths.len(), preds.len())?;
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for &k in set {
        if k >= preds.len() {
            return Err(Error::InvalidArgument(format!("device {k} out of range")));
        }
        total += rmse(&preds[k], &truths[k])?;
    }
    Ok(total / set.len() as f64)
}

/// `‖Θ̂ − Θ*‖_F / √K`.
pub fn param_error(hat: &DMatrix<f64>, star: &DMatrix<f64>) -> f64 {
    (hat - star).norm() / (star.ncols() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InclusionRates {
    pub correct_rate: f64,
    pub false_rate: f64,
}

/// Per-device fractions of truly nonzero (resp. zero) coefficients included,
/// averaged over devices. A rate is 0 when its denominator is empty.
pub fn inclusion_rates(masks: &[Vec<bool>], support: &[bool]) -> Result<InclusionRates> {
    if masks.is_empty() {
        return Err(Error::InvalidArgument("no inclusion masks".into()));
    }
    let nonzero = support.iter().filter(|s| **s).count();
    let zero = support.len() - nonzero;
    let (mut correct, mut wrong) = (0.0, 0.0);
    for m in masks {
        ensure_dim("inclusion mask", support.len(), m.len())?;
        let hits = m.iter().zip(support).filter(|(m, s)| **m && **s).count();
        let false_hits = m.iter().zip(support).filter(|(m, s)| **m && !**s).count();
        if nonzero > 0 {
            correct += hits as f64 / nonzero as f64;
        }
        if zero > 0 {
            wrong += false_hits as f64 / zero as f64;
        }
    }
    let n = masks.len() as f64;
    Ok(InclusionRates {
        correct_rate: correct / n,
        false_rate: wrong / n,
    })
}

/// Fraction of `truths` inside their closed intervals.
pub fn ci_coverage(intervals: &[(f64, f64)], truths: &[f64]) -> Result<f64> {
    ensure_dim("coverage", truths.len(), intervals.len())?;
    if truths.is_empty() {
        return Err(Error::InvalidArgument("no intervals".into()));
    }
    let inside = intervals.iter().zip(truths).filter(|((lo, hi), t)| lo <= *t && *t <= hi).count();
    Ok(inside as f64 / truths.len() as f64)
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_device_rmse: BTreeMap<String, f64>,
    pub a_rmse: f64,
    pub param_error: Option<f64>,
    pub inclusion: Option<InclusionRates>,
    pub coverage: Option<f64>,
}

impl EvalReport {
    /// Flat `name → value` view for manifests.
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::from([("a_rmse".to_string(), self.a_rmse)]);
        if let Some(p) = self.param_error {
            out.insert("param_error".into(), p);
        }
        if let Some(i) = self.inclusion {
            out.insert("correct_inclusion".into(), i.correct_rate);
            out.insert("false_inclusion".into(), i.false_rate);
        }
        if let Some(c) = self.coverage {
            out.insert("coverage".into(), c);
        }
        out
    }
}

/// Held-out evaluation of per-device coefficients `theta` (column `k` for device `k`).
pub fn evaluate(theta: &DMatrix<f64>, data: &FederatedDataset, set: &[usize]) -> Result<EvalReport> {
    ensure_dim("coefficient rows", data.dim(), theta.nrows())?;
    ensure_dim("coefficient columns", data.k(), theta.ncols())?;
    let tests = data
        .test_devices()
        .ok_or_else(|| Error::InvalidArgument("dataset has no held-out split".into()))?;
    let preds: Vec<DVector<f64>> = tests.iter().enumerate().map(|(k, t)| t.predict(&theta.column(k).into_owned())).collect();
    let truths: Vec<DVector<f64>> = tests.iter().map(|t| t.y().clone()).collect();
    let mut per = BTreeMap::new();
    for &k in set {
        per.insert(tests[k].id().to_string(), rmse(&preds[k], &truths[k])?);
    }
    Ok(EvalReport {
        per_device_rmse: per,
        a_rmse: a_rmse(&preds, &truths, set)?,
        param_error: data.true_theta.as_ref().map(|t| param_error(theta, t)),
        inclusion: None,
        coverage: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn a_rmse_examples() {
        let y = vec![DVector::from_vec(vec![1.0, 2.0])];
        assert_eq!(a_rmse(&y, &y, &[0]).unwrap(), 0.0);
        let p = vec![DVector::from_vec(vec![2.0, 3.0])];
        assert_eq!(a_rmse(&p, &y, &[0]).unwrap(), 1.0);
        assert!(a_rmse(&p, &y, &[]).is_err());
    }

    #[test]
    fn param_error_examples() {
        let star = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert_eq!(param_error(&star, &star), 0.0);
        let hat = DMatrix::from_column_slice(2, 1, &[4.0, 5.0]);
        assert_eq!(param_error(&hat, &star), 5.0);
        let scaled = &star + (&hat - &star) * -2.5;
        assert_relative_eq!(param_error(&scaled, &star), 12.5, epsilon = 1e-12);
    }

    #[test]
    fn inclusion_examples() {
        let support = vec![true, true, false, false, true, false, false, false];
        let r = inclusion_rates(&[support.clone()], &support).unwrap();
        assert_eq!((r.correct_rate, r.false_rate), (1.0, 0.0));
        let r = inclusion_rates(&[vec![true; 8]], &support).unwrap();
        assert_eq!((r.correct_rate, r.false_rate), (1.0, 1.0));
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(ci_coverage(&[(0.0, 1.0), (-1.0, 1.0)], &[0.5, 0.0]).unwrap(), 1.0);
        assert_eq!(ci_coverage(&[(0.0, 1.0), (-1.0, 1.0)], &[2.0, 3.0]).unwrap(), 0.0);
    }

    /// Known-variance normal mean: the z-interval at level 0.9 covers the
    /// truth 90% of the time.
    #[test]
    fn coverage_is_calibrated() {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = crate::rng::stream(1, "calib", 0);
        let (n, reps) = (25, 200);
        let z = 1.644_853_626_951_472_2;
        let mut intervals = Vec::new();
        for _ in 0..reps {
            let mean = (0..n).map(|_| -> f64 { StandardNormal.sample(&mut r) }).sum::<f64>() / n as f64;
            let half = z / (n as f64).sqrt();
            intervals.push((mean - half, mean + half));
        }
        let cov = ci_coverage(&intervals, &vec![0.0; reps]).unwrap();
        assert!((cov - 0.9).abs() <= 0.05, "coverage {cov}");
    }

    #[test]
    fn mean_sd_basic() {
        assert_eq!(mean_sd(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_sd(&[4.0]), (4.0, 0.0));
    }

    proptest! {
        #[test]
        fn a_rmse_nonnegative(v in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
            let p = vec![DVector::from_vec(v.clone())];
            let t = vec![DVector::zeros(v.len())];
            let a = a_rmse(&p, &t, &[0]).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert_eq!(a == 0.0, v.iter().all(|x| *x == 0.0));
        }

        #[test]
        fn inclusion_bounded(bits in proptest::collection::vec(any::<bool>(), 16)) {
            let (mask, support) = bits.split_at(8);
            let r = inclusion_rates(&[mask.to_vec()], support).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.correct_rate) && (0.0..=1.0).contains(&r.false_rate));
        }

        #[test]
        fn param_error_triangle(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let z = DMatrix::zeros(2, 3);
            let a = DMatrix::from_vec(2, 3, a);
            let b = DMatrix::from_vec(2, 3, b);
            prop_assert!(param_error(&a, &b) <= param_error(&a, &z) + param_error(&z, &b) + 1e-12);
        }
    }
}
