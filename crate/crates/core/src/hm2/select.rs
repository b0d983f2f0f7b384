//! Credible intervals and interval-based variable selection.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MIN_CI_SAMPLES: usize = 100;

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Equal-tailed interval at `level`.
pub fn credible_interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level} outside (0, 1)")));
    }
    if samples.len() < MIN_CI_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "{} samples, credible intervals need at least {MIN_CI_SAMPLES}",
            samples.len()
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("credible interval samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&sorted, tail), quantile_sorted(&sorted, 1.0 - tail)))
}

/// Interval per row of a `d × draws` sample matrix.
pub fn coefficient_intervals(samples: &DMatrix<f64>, level: f64) -> Result<Vec<(f64, f64)>> {
    samples
        .row_iter()
        .map(|r| credible_interval(&r.iter().copied().collect::<Vec<_>>(), level))
        .collect()
}

pub fn excludes_zero((lo, hi): (f64, f64)) -> bool {
    lo > 0.0 || hi < 0.0
}

/// Keeps a coefficient when its interval excludes zero.
pub fn select_variables(samples: &DMatrix<f64>, level: f64) -> Result<Vec<bool>> {
    Ok(coefficient_intervals(samples, level)?.into_iter().map(excludes_zero).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn normal_quantiles() {
        let mut r = rng::stream(1, "ci", 0);
        let s: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut r)).collect();
        let (lo, hi) = credible_interval(&s, 0.9).unwrap();
        assert!((lo + 1.645).abs() < 0.03 && (hi - 1.645).abs() < 0.03, "{lo} {hi}");
    }

    #[test]
    fn constant_and_small_inputs() {
        assert_eq!(credible_interval(&[2.5; 100], 0.9).unwrap(), (2.5, 2.5));
        assert!(credible_interval(&[1.0; 99], 0.9).is_err());
        assert!(credible_interval(&[1.0; 200], 1.0).is_err());
    }

    #[test]
    fn type7_interpolation() {
        let s: Vec<f64> = (0..101).map(f64::from).collect();
        let (lo, hi) = credible_interval(&s, 0.9).unwrap();
        assert_relative_eq!(lo, 5.0, epsilon = 1e-12);
        assert_relative_eq!(hi, 95.0, epsilon = 1e-12);
        assert_relative_eq!(quantile_sorted(&[0.0, 10.0], 0.25), 2.5);
    }

    #[test]
    fn selection_rule() {
        assert!(!excludes_zero((-0.1, 0.2)));
        assert!(excludes_zero((0.5, 1.2)));
        assert!(excludes_zero((-3.0, -0.1)));
        let mut r = rng::stream(2, "sel", 0);
        let m = DMatrix::from_fn(2, 500, |i, _| if i == 0 { 3.0 } else { 0.0 } + 0.1 * { let z: f64 = StandardNormal.sample(&mut r); z });
        assert_eq!(select_variables(&m, 0.9).unwrap(), vec![true, false]);
    }

    #[test]
    fn interval_width_shrinks_with_spread() {
        let mut r = rng::stream(3, "w", 0);
        let base: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut r)).collect();
        let narrow: Vec<f64> = base.iter().map(|v| v * 0.5).collect();
        let (a, b) = credible_interval(&base, 0.9).unwrap();
        let (c, d) = credible_interval(&narrow, 0.9).unwrap();
        assert!(d - c < b - a);
    }

    proptest! {
        #[test]
        fn nested_levels(v in proptest::collection::vec(-100.0f64..100.0, 100..300)) {
            let (a, b) = credible_interval(&v, 0.5).unwrap();
            let (c, d) = credible_interval(&v, 0.9).unwrap();
            prop_assert!(c <= a && b <= d && a <= b);
        }
    }
}
