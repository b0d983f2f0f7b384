//! Gaussian algebra in natural parameters, matrix-normal sampling and
//! positive-definite matrix utilities.
//!
//! A [`NaturalGaussian`] stores `(r, Q) = (Σ⁻¹μ, Σ⁻¹)`. Products and quotients
//! of densities are sums and differences of these parameters, so they are
//! exact and closed even when the result is improper. Only conversion to
//! moment form insists on a positive-definite precision.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::rng;

const SYMMETRY_TOL: f64 = 1e-10;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Multivariate Gaussian in natural parameters. May be improper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalGaussian {
    r: DVector<f64>,
    q: DMatrix<f64>,
}

/// Multivariate Gaussian in moment form. Always proper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentGaussian {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl NaturalGaussian {
    pub fn new(r: DVector<f64>, q: DMatrix<f64>) -> Result<Self> {
        ensure_dim("natural gaussian precision rows", r.len(), q.nrows())?;
        ensure_dim("natural gaussian precision cols", r.len(), q.ncols())?;
        check_symmetric(&q)?;
        Ok(Self { r, q: symmetrize(&q) })
    }

    /// The improper uniform density `(r = 0, Q = 0)`, identity for products.
    pub fn flat(dim: usize) -> Self {
        Self {
            r: DVector::zeros(dim),
            q: DMatrix::zeros(dim, dim),
        }
    }

    /// Independent coordinates with the given means and variances.
    pub fn from_diagonal(mean: &[f64], variance: &[f64]) -> Result<Self> {
        ensure_dim("diagonal gaussian", mean.len(), variance.len())?;
        if variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("variances must be positive".into()));
        }
        let r = DVector::from_iterator(mean.len(), mean.iter().zip(variance).map(|(m, v)| m / v));
        let q = DMatrix::from_diagonal(&DVector::from_iterator(variance.len(), variance.iter().map(|v| 1.0 / v)));
        Ok(Self { r, q })
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Density product: natural parameters add.
    pub fn product(&self, other: &Self) -> Result<Self> {
        ensure_dim("gaussian product", self.dim(), other.dim())?;
        Ok(Self {
            r: &self.r + &other.r,
            q: &self.q + &other.q,
        })
    }

    /// Density quotient: natural parameters subtract. The result may be improper.
    pub fn quotient(&self, other: &Self) -> Result<Self> {
        ensure_dim("gaussian quotient", self.dim(), other.dim())?;
        Ok(Self {
            r: &self.r - &other.r,
            q: &self.q - &other.q,
        })
    }

    /// Raises the density to the power `factor` (scales both parameters).
    pub fn scale(&self, factor: f64) -> Self {
        Self {
            r: &self.r * factor,
            q: &self.q * factor,
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.q)
    }

    pub fn is_proper(&self) -> bool {
        self.dim() > 0 && self.min_eigenvalue() > properness_threshold(&self.q)
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(self.q.iter()).all(|v| v.is_finite())
    }

    pub fn to_moments(&self) -> Result<MomentGaussian> {
        let min_eigenvalue = self.min_eigenvalue();
        if !(min_eigenvalue > properness_threshold(&self.q)) {
            return Err(Error::ImproperDensity { min_eigenvalue });
        }
        let chol = self
            .q
            .clone()
            .cholesky()
            .ok_or(Error::ImproperDensity { min_eigenvalue })?;
        let mu = chol.solve(&self.r);
        let sigma = symmetrize(&chol.inverse());
        Ok(MomentGaussian { mu, sigma })
    }

    pub fn from_moments(m: &MomentGaussian) -> Result<Self> {
        let chol = m
            .sigma
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { context: "covariance" })?;
        let q = symmetrize(&chol.inverse());
        let r = chol.solve(&m.mu);
        Ok(Self { r, q })
    }
}

impl MomentGaussian {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        ensure_dim("moment gaussian covariance rows", mu.len(), sigma.nrows())?;
        ensure_dim("moment gaussian covariance cols", mu.len(), sigma.ncols())?;
        check_symmetric(&sigma)?;
        let sigma = symmetrize(&sigma);
        if sigma.clone().cholesky().is_none() || min_eigenvalue(&sigma) <= 0.0 {
            return Err(Error::NotPositiveDefinite { context: "covariance" });
        }
        Ok(Self { mu, sigma })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        ensure_dim("gaussian density point", self.dim(), x.len())?;
        let chol = self
            .sigma
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { context: "covariance" })?;
        let diff = x - &self.mu;
        let z = chol.l().solve_lower_triangular(&diff).expect("cholesky factor is invertible");
        let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + log_det + z.norm_squared()))
    }

    /// One draw using a Cholesky factor of the covariance.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let l = self
            .sigma
            .clone()
            .cholesky()
            .expect("moment gaussian covariance is PD by construction")
            .unpack();
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        &self.mu + l * z
    }
}

/// Matrix-normal distribution `MN(M, A, B)`: `vec(X) ~ N(vec(M), B ⊗ A)`.
#[derive(Debug, Clone)]
pub struct MatrixNormalSpec {
    mean: DMatrix<f64>,
    row_cov: DMatrix<f64>,
    col_cov: DMatrix<f64>,
}

impl MatrixNormalSpec {
    pub fn new(mean: DMatrix<f64>, row_cov: DMatrix<f64>, col_cov: DMatrix<f64>) -> Result<Self> {
        ensure_dim("matrix normal row covariance", mean.nrows(), row_cov.nrows())?;
        ensure_dim("matrix normal row covariance", mean.nrows(), row_cov.ncols())?;
        ensure_dim("matrix normal column covariance", mean.ncols(), col_cov.nrows())?;
        ensure_dim("matrix normal column covariance", mean.ncols(), col_cov.ncols())?;
        for (m, context) in [(&row_cov, "row covariance"), (&col_cov, "column covariance")] {
            check_symmetric(m)?;
            if symmetrize(m).cholesky().is_none() {
                return Err(Error::NotPositiveDefinite { context });
            }
        }
        Ok(Self {
            mean,
            row_cov: symmetrize(&row_cov),
            col_cov: symmetrize(&col_cov),
        })
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn sample(&self, seed: u64) -> DMatrix<f64> {
        self.sample_with(&mut rng::stream(seed, "matrix-normal", 0))
    }

    /// `M + A^{1/2} Z B^{1/2}` with symmetric square roots.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let (d, k) = self.mean.shape();
        let z = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(rng));
        &self.mean + sym_sqrt(&self.row_cov) * z * sym_sqrt(&self.col_cov)
    }
}

/// Random symmetric PD matrix: eigenvalues uniform on `[0.1, 1]`, rotated by a
/// Haar-random orthogonal matrix.
pub fn random_pd(n: usize, seed: u64) -> DMatrix<f64> {
    random_pd_with(n, &mut rng::stream(seed, "random-pd", 0))
}

pub fn random_pd_with<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let eig = Uniform::new_inclusive(0.1, 1.0).expect("valid range");
    let values = DVector::from_fn(n, |_, _| eig.sample(rng));
    let q = random_orthogonal(n, rng);
    symmetrize(&(&q * DMatrix::from_diagonal(&values) * q.transpose()))
}

/// Haar-distributed orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// Adds `jitter·I`, doubling the jitter until a Cholesky factorization succeeds.
pub fn jitter_pd(m: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::InvalidArgument("jitter repair needs a square matrix".into()));
    }
    let base = symmetrize(m);
    let n = m.nrows();
    let mut eps = jitter.max(f64::MIN_POSITIVE);
    for _ in 0..=20 {
        let candidate = &base + DMatrix::identity(n, n) * eps;
        if candidate.clone().cholesky().is_some() {
            return Ok(candidate);
        }
        eps *= 2.0;
    }
    Err(Error::IrrecoverablySingular { jitter: eps / 2.0 })
}

/// Returns `m` untouched when it already factorizes, otherwise the jitter repair.
pub fn ensure_pd(m: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let s = symmetrize(m);
    if s.clone().cholesky().is_some() {
        Ok(s)
    } else {
        jitter_pd(&s, jitter)
    }
}

/// Symmetric square root via eigendecomposition. Eigenvalues at rounding
/// level (relative to the largest) are treated as zero, so PSD-but-singular
/// inputs keep their rank.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let cut = eig.eigenvalues.amax() * 1e-13;
    let roots = eig.eigenvalues.map(|v| if v > cut { v.sqrt() } else { 0.0 });
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Scale-relative properness guard: `1e-10 · (1 + max|diag Q|)`.
pub fn properness_threshold(q: &DMatrix<f64>) -> f64 {
    1e-10 * (1.0 + q.diagonal().amax())
}

pub fn log_det_pd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { context: "log-determinant" })?;
    Ok(chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0)
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidArgument("expected a square matrix".into()));
    }
    let asymmetry = (m - m.transpose()).amax();
    let scale = m.amax().max(1.0);
    if asymmetry > SYMMETRY_TOL * scale || asymmetry.is_nan() {
        return Err(Error::NotSymmetric { asymmetry });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn g1(r: f64, q: f64) -> NaturalGaussian {
        NaturalGaussian::new(DVector::from_element(1, r), DMatrix::from_element(1, 1, q)).unwrap()
    }

    fn normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
        (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    /// Composite Simpson rule on [a, b] with n (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn product_matches_numeric_integration() {
        // a = N(1, 1), b = N(3, 1/2) → natural (1, 1) and (6, 2)
        let c = g1(1.0, 1.0).product(&g1(6.0, 2.0)).unwrap();
        assert_eq!(c.r()[0], 7.0);
        assert_eq!(c.q()[(0, 0)], 3.0);
        let m = c.to_moments().unwrap();
        assert_relative_eq!(m.mean()[0], 7.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(m.covariance()[(0, 0)], 1.0 / 3.0, epsilon = 1e-14);

        // oracle: normalize the pointwise product numerically
        let prod = |x: f64| normal_pdf(x, 1.0, 1.0) * normal_pdf(x, 3.0, 0.5);
        let z = simpson(prod, -15.0, 15.0, 20_000);
        let mean = simpson(|x| x * prod(x), -15.0, 15.0, 20_000) / z;
        let var = simpson(|x| (x - mean).powi(2) * prod(x), -15.0, 15.0, 20_000) / z;
        assert_relative_eq!(mean, 7.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(var, 1.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn flat_is_product_identity() {
        let a = g1(0.3, 2.5);
        assert_eq!(a.product(&NaturalGaussian::flat(1)).unwrap(), a);
    }

    #[test]
    fn quotient_examples() {
        let a = g1(7.0, 3.0).quotient(&g1(6.0, 2.0)).unwrap();
        assert_eq!(a, g1(1.0, 1.0));
        let z = a.quotient(&a).unwrap();
        assert_eq!(z, NaturalGaussian::flat(1));
        assert!(!z.is_proper());
    }

    #[test]
    fn dimension_mismatch_reports_both() {
        let err = g1(1.0, 1.0).product(&NaturalGaussian::flat(2)).unwrap_err();
        match err {
            Error::DimensionMismatch { expected, found, .. } => assert_eq!((expected, found), (1, 2)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn moment_conversions() {
        let m = g1(0.0, 1.0).to_moments().unwrap();
        assert_eq!(m.mean()[0], 0.0);
        assert_eq!(m.covariance()[(0, 0)], 1.0);

        let n = NaturalGaussian::from_moments(
            &MomentGaussian::new(DVector::from_element(1, 2.0), DMatrix::from_element(1, 1, 0.5)).unwrap(),
        )
        .unwrap();
        assert_relative_eq!(n.r()[0], 4.0, epsilon = 1e-14);
        assert_relative_eq!(n.q()[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn improper_to_moments_names_eigenvalue() {
        let g = NaturalGaussian::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5])).unwrap();
        match g.to_moments().unwrap_err() {
            Error::ImproperDensity { min_eigenvalue } => assert_relative_eq!(min_eigenvalue, -0.5, epsilon = 1e-12),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn asymmetric_precision_rejected() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(NaturalGaussian::new(DVector::zeros(2), q), Err(Error::NotSymmetric { .. })));
    }

    fn proper_gaussian(dim: usize, seed: u64) -> NaturalGaussian {
        let mut rng = rng::stream(seed, "test-proper", 0);
        let q = random_pd_with(dim, &mut rng) * 3.0;
        let r = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        NaturalGaussian::new(r, q).unwrap()
    }

    #[test]
    fn round_trip_100_random() {
        for seed in 0..100 {
            let g = proper_gaussian(1 + (seed as usize % 5), seed);
            let back = NaturalGaussian::from_moments(&g.to_moments().unwrap()).unwrap();
            let scale = g.q().amax().max(g.r().amax()).max(1.0);
            assert!((back.q() - g.q()).amax() <= 1e-10 * scale);
            assert!((back.r() - g.r()).amax() <= 1e-10 * scale);
        }
    }

    #[test]
    fn product_density_is_pointwise_product() {
        let mut rng = rng::stream(3, "points", 0);
        for seed in 0..10 {
            let a = proper_gaussian(3, seed);
            let b = proper_gaussian(3, seed + 100);
            let (ma, mb, mc) = (
                a.to_moments().unwrap(),
                b.to_moments().unwrap(),
                a.product(&b).unwrap().to_moments().unwrap(),
            );
            let diffs: Vec<f64> = (0..5)
                .map(|_| {
                    let x = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
                    mc.log_density(&x).unwrap() - ma.log_density(&x).unwrap() - mb.log_density(&x).unwrap()
                })
                .collect();
            for d in &diffs {
                assert_relative_eq!(*d, diffs[0], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn matrix_normal_identity_covariance() {
        let spec = MatrixNormalSpec::new(DMatrix::zeros(1, 3), DMatrix::identity(1, 1), DMatrix::identity(3, 3)).unwrap();
        let mut rng = rng::stream(11, "mn-test", 0);
        let n = 10_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let s = spec.sample_with(&mut rng);
            let v = s.row(0).transpose();
            acc += &v * v.transpose();
        }
        acc /= n as f64;
        assert!((acc - DMatrix::identity(3, 3)).amax() < 0.05);
    }

    #[test]
    fn matrix_normal_column_correlation() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.7, 0.7, 1.0]);
        let spec = MatrixNormalSpec::new(DMatrix::zeros(1, 2), DMatrix::identity(1, 1), b).unwrap();
        let mut rng = rng::stream(5, "mn-corr", 0);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for _ in 0..10_000 {
            let s = spec.sample_with(&mut rng);
            sxy += s[(0, 0)] * s[(0, 1)];
            sxx += s[(0, 0)].powi(2);
            syy += s[(0, 1)].powi(2);
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!((corr - 0.7).abs() < 0.03, "corr {corr}");
    }

    #[test]
    fn matrix_normal_degenerate_mean_and_determinism() {
        let tiny = 1e-12;
        let spec = MatrixNormalSpec::new(
            DMatrix::from_element(3, 2, 7.0),
            DMatrix::identity(3, 3) * tiny,
            DMatrix::identity(2, 2) * tiny,
        )
        .unwrap();
        let s = spec.sample(1);
        assert!(s.iter().all(|v| (v - 7.0).abs() < 1e-9));
        assert_eq!(spec.sample(42), spec.sample(42));
        assert!(MatrixNormalSpec::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn random_pd_spectrum_and_symmetry() {
        let one = random_pd(1, 9);
        assert!(one[(0, 0)] >= 0.1 && one[(0, 0)] <= 1.0);
        for seed in 0..20 {
            let m = random_pd(12, seed);
            assert!((&m - m.transpose()).amax() < 1e-12);
            let eig = SymmetricEigen::new(m).eigenvalues;
            assert!(eig.iter().all(|v| *v >= 0.1 - 1e-9 && *v <= 1.0 + 1e-9));
        }
        assert_eq!(random_pd(5, 3), random_pd(5, 3));
    }

    #[test]
    fn random_pd_cholesky_sweep() {
        for seed in 0..1000 {
            assert!(random_pd(6, seed).cholesky().is_some(), "seed {seed}");
        }
    }

    #[test]
    fn jitter_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(jitter_pd(&m, 1e-8).unwrap(), &m + DMatrix::identity(2, 2) * 1e-8);
        assert_eq!(jitter_pd(&DMatrix::zeros(2, 2), 1e-8).unwrap(), DMatrix::identity(2, 2) * 1e-8);
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let rank1 = &u * u.transpose();
        let fixed = jitter_pd(&rank1, 1e-8).unwrap();
        assert!(fixed.cholesky().is_some());
        let hopeless = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e6]);
        assert!(matches!(jitter_pd(&hopeless, 1e-8), Err(Error::IrrecoverablySingular { .. })));
    }

    #[test]
    fn sym_sqrt_handles_singular_psd() {
        let u = DVector::from_vec(vec![3.0, 4.0]);
        let m = &u * u.transpose();
        let s = sym_sqrt(&m);
        assert!((&s * &s - &m).amax() < 1e-10);
    }

    proptest! {
        #[test]
        fn quotient_inverts_product(seed in 0u64..10_000, dim in 1usize..6) {
            let mut rng = rng::stream(seed, "prop", 0);
            let mk = |rng: &mut rng::StreamRng| {
                let a = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
                let q = symmetrize(&(&a + a.transpose()));
                let r = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
                NaturalGaussian::new(r, q).unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let back = a.product(&b).unwrap().quotient(&b).unwrap();
            prop_assert!((back.r() - a.r()).amax() <= 1e-12);
            prop_assert!((back.q() - a.q()).amax() <= 1e-12);
        }

        #[test]
        fn product_of_proper_is_proper(seed in 0u64..10_000, dim in 1usize..6) {
            let a = proper_gaussian(dim, seed);
            let b = proper_gaussian(dim, seed.wrapping_add(77));
            prop_assert!(a.product(&b).unwrap().is_proper());
        }
    }
}
