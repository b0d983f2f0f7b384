//! Hierarchical model definitions and device-level densities.
//!
//! Hyper-parameters `φ` always live on the transformed scale (positive
//! quantities as logs). Device data enter only through sufficient statistics
//! `S = XXᵀ`, `b = XY`, `YᵀY` and `N`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::datasets::DeviceDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::gaussian::{ensure_pd, NaturalGaussian};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Degrees of freedom of the heavy-tailed importance proposals.
pub const PROPOSAL_DOF: f64 = 7.0;
/// Prior variance of an unpenalized intercept.
pub const INTERCEPT_VARIANCE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Log,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperBlock {
    pub name: String,
    pub length: usize,
    pub transform: Transform,
}

/// Named blocks of the hyper-parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperLayout {
    blocks: Vec<HyperBlock>,
}

impl HyperLayout {
    pub fn new(blocks: Vec<HyperBlock>) -> Result<Self> {
        if blocks.is_empty() || blocks.iter().any(|b| b.length == 0) {
            return Err(Error::InvalidArgument("hyper layout needs non-empty blocks".into()));
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[HyperBlock] {
        &self.blocks
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.length).sum()
    }

    /// Index range of the block called `name`.
    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut at = 0;
        for b in &self.blocks {
            if b.name == name {
                return Some(at..at + b.length);
            }
            at += b.length;
        }
        None
    }

    /// One label per coordinate, e.g. `mu[1]`.
    pub fn labels(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| {
                (1..=b.length).map(move |i| if b.length == 1 { b.name.clone() } else { format!("{}[{i}]", b.name) })
            })
            .collect()
    }

    /// Maps transformed coordinates back to the model scale.
    pub fn to_model(&self, phi: &DVector<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(phi.len());
        let mut at = 0;
        for b in &self.blocks {
            for i in 0..b.length {
                let v = phi[at + i];
                out.push(match b.transform {
                    Transform::Identity => v,
                    Transform::Log => v.exp(),
                });
            }
            at += b.length;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `θ_i ~ N(μ_i, τ_i)` with `φ = (μ, log τ)`.
    MeanFieldNormal,
    /// `θ_i ~ Laplace(0, σ/λ)`, `Y ~ N(Xᵀθ, σ²I)`, `φ = (log λ, log σ²)`.
    LassoLaplace,
    /// `θ_i ~ N(0, (σ/λ)²)`, `Y ~ N(Xᵀθ, σ²I)`, `φ = (log λ, log σ²)`.
    RidgeNormal,
    /// Mean-field structure in four dimensions.
    UqModel,
}

impl ModelKind {
    pub fn has_gaussian_prior(self) -> bool {
        !matches!(self, ModelKind::LassoLaplace)
    }

    fn penalized(self) -> bool {
        matches!(self, ModelKind::LassoLaplace | ModelKind::RidgeNormal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Known observation variance.
    Known(f64),
    /// Per-device plug-in variance from least-squares residuals.
    Residual,
    /// Variance is the `log_sigma2` hyper-parameter.
    Hyper,
}

/// Full model description shared by all devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierModelSpec {
    pub kind: ModelKind,
    pub layout: HyperLayout,
    pub prior_phi: NaturalGaussian,
    pub theta_dim: usize,
    pub noise: NoiseModel,
    /// First coefficient is an intercept with a wide normal prior.
    pub intercept: bool,
    /// Monte Carlo draws for non-Gaussian marginals.
    pub marginal_draws: usize,
}

fn block(name: &str, length: usize, transform: Transform) -> HyperBlock {
    HyperBlock {
        name: name.into(),
        length,
        transform,
    }
}

impl HierModelSpec {
    /// `μ ~ N(0, 10²)`, `log τ ~ N(0, 2²)`.
    pub fn mean_field(d: usize, noise: NoiseModel) -> Result<Self> {
        if noise == NoiseModel::Hyper {
            return Err(Error::InvalidArgument("mean-field models take a known or plug-in noise variance".into()));
        }
        let layout = HyperLayout::new(vec![block("mu", d, Transform::Identity), block("log_tau", d, Transform::Log)])?;
        let var: Vec<f64> = std::iter::repeat_n(100.0, d).chain(std::iter::repeat_n(4.0, d)).collect();
        Ok(Self {
            kind: ModelKind::MeanFieldNormal,
            prior_phi: NaturalGaussian::from_diagonal(&vec![0.0; 2 * d], &var)?,
            layout,
            theta_dim: d,
            noise,
            intercept: false,
            marginal_draws: 2048,
        })
    }

    /// Four-dimensional mean-field model with observation sd 0.1.
    pub fn uq() -> Self {
        let mut s = Self::mean_field(4, NoiseModel::Known(0.01)).expect("valid layout");
        s.kind = ModelKind::UqModel;
        s
    }

    /// `log λ ~ N(0, 2²)`, `log σ² ~ N(0, 2²)`.
    pub fn lasso(d: usize, intercept: bool) -> Result<Self> {
        Self::penalized(ModelKind::LassoLaplace, d, intercept)
    }

    pub fn ridge(d: usize, intercept: bool) -> Result<Self> {
        Self::penalized(ModelKind::RidgeNormal, d, intercept)
    }

    fn penalized(kind: ModelKind, d: usize, intercept: bool) -> Result<Self> {
        if d == 0 || (intercept && d == 1) {
            return Err(Error::InvalidArgument("need at least one penalized coefficient".into()));
        }
        Ok(Self {
            kind,
            layout: HyperLayout::new(vec![block("log_lambda", 1, Transform::Log), block("log_sigma2", 1, Transform::Log)])?,
            prior_phi: NaturalGaussian::from_diagonal(&[0.0, 0.0], &[4.0, 4.0])?,
            theta_dim: d,
            noise: NoiseModel::Hyper,
            intercept,
            marginal_draws: 2048,
        })
    }

    pub fn phi_dim(&self) -> usize {
        self.layout.total_dim()
    }

    pub fn validate(&self) -> Result<()> {
        ensure_dim("hyper prior", self.phi_dim(), self.prior_phi.dim())?;
        if !self.prior_phi.is_proper() {
            return Err(Error::InvalidArgument("hyper prior must be proper".into()));
        }
        let expected = if self.kind.penalized() { 2 } else { 2 * self.theta_dim };
        ensure_dim("hyper layout", expected, self.phi_dim())?;
        match (self.kind.penalized(), self.noise) {
            (true, NoiseModel::Hyper) => {}
            (false, NoiseModel::Known(v)) if v > 0.0 => {}
            (false, NoiseModel::Residual) => {}
            _ => return Err(Error::InvalidArgument("noise model inconsistent with model kind".into())),
        }
        if self.marginal_draws == 0 {
            return Err(Error::InvalidArgument("marginal_draws must be positive".into()));
        }
        Ok(())
    }

    /// Variance of the observation noise at `phi` for a device.
    pub fn noise_variance(&self, phi: &DVector<f64>, stats: &DeviceStats) -> f64 {
        match self.noise {
            NoiseModel::Known(v) => v,
            NoiseModel::Residual => stats.residual_var,
            NoiseModel::Hyper => phi[1].exp(),
        }
    }

    /// Laplace diversity `b = σ/λ`.
    fn laplace_scale(&self, phi: &DVector<f64>) -> f64 {
        (0.5 * phi[1] - phi[0]).exp()
    }

    /// Mean and variances of a Gaussian coefficient prior at `phi`.
    pub fn gaussian_theta_prior(&self, phi: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let d = self.theta_dim;
        match self.kind {
            ModelKind::MeanFieldNormal | ModelKind::UqModel => Ok((
                DVector::from_iterator(d, phi.iter().take(d).copied()),
                DVector::from_iterator(d, phi.iter().skip(d).take(d).map(|v| v.exp())),
            )),
            ModelKind::RidgeNormal => {
                let s = self.laplace_scale(phi);
                let mut var = DVector::from_element(d, s * s);
                if self.intercept {
                    var[0] = INTERCEPT_VARIANCE;
                }
                Ok((DVector::zeros(d), var))
            }
            ModelKind::LassoLaplace => Err(Error::InvalidArgument("Laplace prior is not Gaussian".into())),
        }
    }

    /// `log p(θ | φ)`.
    pub fn log_theta_prior(&self, theta: &DVector<f64>, phi: &DVector<f64>) -> f64 {
        match self.kind {
            ModelKind::LassoLaplace => {
                let b = self.laplace_scale(phi);
                theta
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        if self.intercept && i == 0 {
                            normal_logpdf(*t, 0.0, INTERCEPT_VARIANCE)
                        } else {
                            -(2.0 * b).ln() - t.abs() / b
                        }
                    })
                    .sum()
            }
            _ => {
                let (m, v) = self.gaussian_theta_prior(phi).expect("gaussian kind");
                (0..theta.len()).map(|i| normal_logpdf(theta[i], m[i], v[i])).sum()
            }
        }
    }

    /// `log p(Y | θ, φ)`.
    pub fn log_likelihood(&self, theta: &DVector<f64>, phi: &DVector<f64>, stats: &DeviceStats) -> f64 {
        let s2 = self.noise_variance(phi, stats);
        -0.5 * (stats.n as f64 * (LN_2PI + s2.ln()) + stats.rss(theta) / s2)
    }

    /// `log p(Y | θ, φ) + log p(θ | φ)`.
    pub fn log_joint(&self, theta: &DVector<f64>, phi: &DVector<f64>, stats: &DeviceStats) -> f64 {
        self.log_likelihood(theta, phi, stats) + self.log_theta_prior(theta, phi)
    }
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean).powi(2) / var)
}

/// Sufficient statistics of a device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceStats {
    pub gram: DMatrix<f64>,
    pub xy: DVector<f64>,
    pub yy: f64,
    pub n: usize,
    /// Least-squares residual variance, or 1 when it cannot be estimated.
    pub residual_var: f64,
}

impl DeviceStats {
    pub fn new(data: &DeviceDataset) -> Self {
        let gram = data.gram();
        let xy = data.xy();
        let yy = data.y().norm_squared();
        let n = data.n();
        let d = data.dim();
        let residual_var = if n > d {
            gram.clone()
                .cholesky()
                .map(|c| {
                    let fit = xy.dot(&c.solve(&xy));
                    ((yy - fit) / (n - d) as f64).max(1e-12)
                })
                .unwrap_or(1.0)
        } else {
            1.0
        };
        Self {
            gram,
            xy,
            yy,
            n,
            residual_var,
        }
    }

    pub fn dim(&self) -> usize {
        self.xy.len()
    }

    /// `‖Y − Xᵀθ‖² = YᵀY − 2θᵀb + θᵀSθ`.
    pub fn rss(&self, theta: &DVector<f64>) -> f64 {
        (self.yy - 2.0 * theta.dot(&self.xy) + theta.dot(&(&self.gram * theta))).max(0.0)
    }
}

/// Exact `log N(Y; Xᵀm, s²I + XᵀDX)` for a diagonal Gaussian coefficient prior,
/// via the determinant lemma and Woodbury on the `d × d` system.
pub fn gaussian_marginal(stats: &DeviceStats, mean: &DVector<f64>, var: &DVector<f64>, s2: f64) -> Result<f64> {
    if stats.n == 0 {
        return Ok(0.0);
    }
    let d = stats.dim();
    ensure_dim("prior mean", d, mean.len())?;
    let half = var.map(f64::sqrt);
    let scaled = DMatrix::from_fn(d, d, |i, j| half[i] * stats.gram[(i, j)] * half[j] / s2);
    let m = DMatrix::identity(d, d) + scaled;
    let chol = match m.clone().cholesky() {
        Some(c) => c,
        None => ensure_pd(&m, 1e-12)?.cholesky().ok_or(Error::NotPositiveDefinite { context: "marginal covariance" })?,
    };
    let log_det = stats.n as f64 * s2.ln() + 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let sm = &stats.gram * mean;
    let xr = &stats.xy - &sm;
    let rr = (stats.yy - 2.0 * mean.dot(&stats.xy) + mean.dot(&sm)).max(0.0);
    let u = half.component_mul(&xr);
    let quad = rr / s2 - u.dot(&chol.solve(&u)) / (s2 * s2);
    let out = -0.5 * (stats.n as f64 * LN_2PI + log_det + quad);
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::NonFinite("gaussian marginal".into()))
    }
}

/// `log f_k(φ)` for kinds with a Gaussian coefficient prior.
pub fn log_marginal_gaussian(phi: &DVector<f64>, stats: &DeviceStats, spec: &HierModelSpec) -> Result<f64> {
    let (m, v) = spec.gaussian_theta_prior(phi)?;
    gaussian_marginal(stats, &m, &v, spec.noise_variance(phi, stats))
}

/// Standardized draws reused across `φ` (common random numbers), for
/// multivariate-t proposals: `θ = m + L z / √w`.
#[derive(Debug, Clone)]
pub struct TDraws {
    pub z: DMatrix<f64>,
    pub w: Vec<f64>,
}

impl TDraws {
    pub fn new<R: Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Self {
        let chi = ChiSquared::new(PROPOSAL_DOF).expect("positive dof");
        let z = DMatrix::from_fn(dim, count, |_, _| StandardNormal.sample(rng));
        let w = (0..count).map(|_| chi.sample(rng) / PROPOSAL_DOF).collect();
        Self { z, w }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// `log t_ν` normalizing constant for dimension `dim`, without the scale determinant.
pub fn t_log_norm(dim: usize) -> f64 {
    let (nu, p) = (PROPOSAL_DOF, dim as f64);
    ln_gamma((nu + p) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * p * (nu * std::f64::consts::PI).ln()
}

/// Multivariate t with [`PROPOSAL_DOF`] degrees of freedom and scale matrix `Σ = LLᵀ`.
#[derive(Debug, Clone)]
pub struct StudentT {
    centre: DVector<f64>,
    factor: DMatrix<f64>,
    log_norm: f64,
}

impl StudentT {
    pub fn new(centre: DVector<f64>, scale: &DMatrix<f64>) -> Result<Self> {
        ensure_dim("t scale", centre.len(), scale.nrows())?;
        let chol = ensure_pd(scale, 1e-12)?
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { context: "t scale" })?;
        let factor = chol.l();
        let log_norm = t_log_norm(centre.len()) - factor.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { centre, factor, log_norm })
    }

    pub fn centre(&self) -> &DVector<f64> {
        &self.centre
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let chi = ChiSquared::new(PROPOSAL_DOF).expect("positive dof");
        let z = DVector::from_fn(self.centre.len(), |_, _| StandardNormal.sample(rng));
        let w: f64 = chi.sample(rng) / PROPOSAL_DOF;
        &self.centre + &self.factor * z / w.sqrt()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let u = self
            .factor
            .solve_lower_triangular(&(x - &self.centre))
            .expect("cholesky factor is invertible");
        let p = self.centre.len() as f64;
        self.log_norm - 0.5 * (PROPOSAL_DOF + p) * (1.0 + u.norm_squared() / PROPOSAL_DOF).ln()
    }
}

/// Importance-sampling estimate of `log f_k(φ)` under the Laplace prior.
///
/// The proposal is a multivariate t centred on the posterior under a normal
/// prior of matching variance, so the estimate stays well-behaved when the
/// likelihood is much sharper than the prior.
pub fn log_marginal_laplace(phi: &DVector<f64>, stats: &DeviceStats, spec: &HierModelSpec, draws: &TDraws) -> Result<f64> {
    if stats.n == 0 {
        return Ok(0.0);
    }
    let d = spec.theta_dim;
    ensure_dim("proposal draws", d, draws.z.nrows())?;
    let s2 = spec.noise_variance(phi, stats);
    let b = spec.laplace_scale(phi);
    let mut prec = &stats.gram / s2;
    for i in 0..d {
        let v = if spec.intercept && i == 0 { INTERCEPT_VARIANCE } else { 2.0 * b * b };
        prec[(i, i)] += 1.0 / v;
    }
    let prec = ensure_pd(&prec, 1e-12)?;
    let chol = prec.cholesky().ok_or(Error::NotPositiveDefinite { context: "laplace proposal" })?;
    let centre = chol.solve(&(&stats.xy / s2));
    // scale matrix Σ = c·P⁻¹ with factor L = √c · (chol⁻ᵀ)
    let inflate: f64 = 1.5;
    let l_inv_t = chol
        .l()
        .transpose()
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite { context: "laplace proposal" })?
        * inflate.sqrt();
    let log_det_l = 0.5 * d as f64 * inflate.ln() - chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let norm = t_log_norm(d) - log_det_l;
    let offsets = &l_inv_t * &draws.z;
    let mut logw = Vec::with_capacity(draws.len());
    for j in 0..draws.len() {
        let scale = 1.0 / draws.w[j].sqrt();
        let theta = &centre + offsets.column(j) * scale;
        let delta = draws.z.column(j).norm_squared() / draws.w[j];
        let log_g = norm - 0.5 * (PROPOSAL_DOF + d as f64) * (1.0 + delta / PROPOSAL_DOF).ln();
        logw.push(spec.log_joint(&theta, phi, stats) - log_g);
    }
    let lse = log_sum_exp(&logw);
    if !lse.is_finite() {
        return Err(Error::VanishingWeights {
            phi: phi.iter().copied().collect(),
        });
    }
    Ok(lse - (draws.len() as f64).ln())
}

/// `log f_k(φ)` for any kind. `draws` is only used by the Laplace kind.
pub fn log_marginal(phi: &DVector<f64>, stats: &DeviceStats, spec: &HierModelSpec, draws: Option<&TDraws>) -> Result<f64> {
    if spec.kind.has_gaussian_prior() {
        log_marginal_gaussian(phi, stats, spec)
    } else {
        let draws = draws.ok_or_else(|| Error::InvalidArgument("Laplace marginal needs proposal draws".into()))?;
        log_marginal_laplace(phi, stats, spec, draws)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
