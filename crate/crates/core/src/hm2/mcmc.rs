//! Device-level posterior sampling and fast adaptation of new devices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ep::{EpDevice, EpServer};
use super::model::{DeviceStats, HierModelSpec, ModelKind, INTERCEPT_VARIANCE};
use crate::datasets::DeviceDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::gaussian::{ensure_pd, symmetrize, MomentGaussian};
use crate::rng;

/// Acceptance rates outside this band are reported as warnings.
pub const ACCEPTANCE_BAND: (f64, f64) = (0.05, 0.7);
const TARGET_ACCEPTANCE: f64 = 0.234;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub draws: usize,
    pub burn_in: usize,
    /// Keep every `thin`-th post-burn-in state.
    pub thin: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            draws: 2000,
            burn_in: 5000,
            thin: 20,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 || self.thin == 0 {
            return Err(Error::InvalidArgument("draws and thin must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Chain {
    /// One column per retained state.
    pub samples: DMatrix<f64>,
    /// Post-burn-in acceptance rate.
    pub acceptance: f64,
}

impl Chain {
    pub fn acceptance_ok(&self) -> bool {
        (ACCEPTANCE_BAND.0..=ACCEPTANCE_BAND.1).contains(&self.acceptance)
    }

    pub fn mean(&self) -> DVector<f64> {
        self.samples.column_mean()
    }
}

/// Random-walk Metropolis whose Gaussian proposal is tuned during burn-in:
/// covariance `(2.38²/D)·(Σ̂ + εI)` from the chain so far, times a global
/// scale pushed towards 23% acceptance. Proposals are frozen after burn-in.
pub fn adaptive_metropolis<F, R>(
    log_target: F,
    init: DVector<f64>,
    init_cov: &DMatrix<f64>,
    cfg: &McmcConfig,
    rng: &mut R,
) -> Result<Chain>
where
    F: Fn(&DVector<f64>) -> f64,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let dim = init.len();
    ensure_dim("initial covariance", dim, init_cov.nrows())?;
    let base = 2.38 * 2.38 / dim as f64;
    let mut factor = cholesky_factor(&(init_cov * base))?;
    let mut log_scale = 0.0f64;
    let mut x = init;
    let mut fx = log_target(&x);
    if !fx.is_finite() {
        return Err(Error::NonFinite("log target at the initial state".into()));
    }
    let mut run_mean = x.clone();
    let mut run_cov = DMatrix::zeros(dim, dim);
    let total = cfg.burn_in + cfg.draws * cfg.thin;
    let mut samples = DMatrix::zeros(dim, cfg.draws);
    let mut accepted = 0usize;
    for it in 0..total {
        let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let cand = &x + &factor * z * log_scale.exp();
        let fc = log_target(&cand);
        let alpha = if fc.is_finite() { (fc - fx).min(0.0).exp() } else { 0.0 };
        let accept = rng.random::<f64>() < alpha;
        if accept {
            x = cand;
            fx = fc;
        }
        if it < cfg.burn_in {
            let n = (it + 2) as f64;
            let delta = &x - &run_mean;
            run_mean += &delta / n;
            run_cov = &run_cov * ((n - 2.0) / (n - 1.0)) + &delta * delta.transpose() / n;
            log_scale += (alpha - TARGET_ACCEPTANCE) / ((it + 1) as f64).sqrt();
            if it >= 200 && it % 100 == 0 {
                let eps = 1e-10 * (1.0 + run_cov.diagonal().amax());
                if let Ok(f) = cholesky_factor(&((&run_cov + DMatrix::identity(dim, dim) * eps) * base)) {
                    factor = f;
                    log_scale = 0.0;
                }
            }
        } else {
            accepted += accept as usize;
            let k = it - cfg.burn_in;
            if k % cfg.thin == cfg.thin - 1 {
                samples.set_column(k / cfg.thin, &x);
            }
        }
    }
    Ok(Chain {
        samples,
        acceptance: accepted as f64 / (cfg.draws * cfg.thin) as f64,
    })
}

fn cholesky_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(ensure_pd(m, 1e-12)?
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { context: "proposal covariance" })?
        .l())
}

/// Mean and covariance of the Gaussian (or Gaussian-approximated Laplace)
/// coefficient posterior at fixed `phi`.
pub fn theta_gaussian_approx(spec: &HierModelSpec, stats: &DeviceStats, phi: &DVector<f64>) -> Result<MomentGaussian> {
    let d = spec.theta_dim;
    let (mean, var) = match spec.kind {
        ModelKind::LassoLaplace => {
            let b2 = (phi[1] - 2.0 * phi[0]).exp();
            let mut v = DVector::from_element(d, 2.0 * b2);
            if spec.intercept {
                v[0] = INTERCEPT_VARIANCE;
            }
            (DVector::zeros(d), v)
        }
        _ => spec.gaussian_theta_prior(phi)?,
    };
    let s2 = spec.noise_variance(phi, stats);
    let mut prec = &stats.gram / s2;
    for i in 0..d {
        prec[(i, i)] += 1.0 / var[i];
    }
    let chol = ensure_pd(&prec, 1e-12)?
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { context: "coefficient posterior" })?;
    let rhs = &stats.xy / s2 + mean.component_div(&var);
    MomentGaussian::new(chol.solve(&rhs), symmetrize(&chol.inverse()))
}

/// Joint draws of `(θ_k, φ)` from `cavity(φ)·p(Y_k | θ_k, φ)·p(θ_k | φ)`.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    /// `d × draws`.
    pub theta: DMatrix<f64>,
    /// `totalDim × draws`, transformed scale.
    pub phi: DMatrix<f64>,
    pub acceptance: f64,
}

pub fn device_posterior_sample<R: Rng + ?Sized>(
    spec: &HierModelSpec,
    stats: &DeviceStats,
    cavity: &MomentGaussian,
    cfg: &McmcConfig,
    rng: &mut R,
) -> Result<PosteriorDraws> {
    let (d, p) = (spec.theta_dim, spec.phi_dim());
    ensure_dim("cavity", p, cavity.dim())?;
    let start = theta_gaussian_approx(spec, stats, cavity.mean())?;
    let mut init = DVector::zeros(d + p);
    init.rows_mut(0, d).copy_from(start.mean());
    init.rows_mut(d, p).copy_from(cavity.mean());
    let mut init_cov = DMatrix::zeros(d + p, d + p);
    init_cov.view_mut((0, 0), (d, d)).copy_from(start.covariance());
    init_cov.view_mut((d, d), (p, p)).copy_from(cavity.covariance());
    let target = |z: &DVector<f64>| {
        let theta = z.rows(0, d).into_owned();
        let phi = z.rows(d, p).into_owned();
        match cavity.log_density(&phi) {
            Ok(c) => c + spec.log_joint(&theta, &phi, stats),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let chain = adaptive_metropolis(target, init, &init_cov, cfg, rng)?;
    Ok(PosteriorDraws {
        theta: chain.samples.rows(0, d).into_owned(),
        phi: chain.samples.rows(d, p).into_owned(),
        acceptance: chain.acceptance,
    })
}

/// Posterior draws for every device at the end of an EP run, each from its
/// own stream. Devices with an improper cavity fall back to the full `q`.
pub fn federated_posteriors(
    spec: &HierModelSpec,
    server: &EpServer,
    devices: &[EpDevice],
    cfg: &McmcConfig,
    seed: u64,
) -> Result<Vec<PosteriorDraws>> {
    let q = server.posterior()?;
    devices
        .par_iter()
        .enumerate()
        .map(|(k, dev)| {
            let cav = server.device_cavity(k, dev)?.to_moments().unwrap_or_else(|_| q.clone());
            let mut r = rng::stream(seed, "device-posterior", k as u64);
            device_posterior_sample(spec, dev.stats(), &cav, cfg, &mut r)
        })
        .collect()
}

/// Coefficient posterior of a device that did not take part in training.
#[derive(Debug, Clone)]
pub enum ThetaPosterior {
    Gaussian(MomentGaussian),
    Samples(Chain),
}

impl ThetaPosterior {
    pub fn mean(&self) -> DVector<f64> {
        match self {
            ThetaPosterior::Gaussian(g) => g.mean().clone(),
            ThetaPosterior::Samples(c) => c.mean(),
        }
    }

    /// `d × n` draws (the stored chain for the sampled kind).
    pub fn draws<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        match self {
            ThetaPosterior::Gaussian(g) => {
                let mut out = DMatrix::zeros(g.dim(), n);
                for j in 0..n {
                    out.set_column(j, &g.sample(rng));
                }
                out
            }
            ThetaPosterior::Samples(c) => c.samples.clone(),
        }
    }
}

/// Fixes `φ` at the mean of `q` and returns the coefficient posterior for
/// `data`: exact for Gaussian priors, sampled for the Laplace prior.
pub fn adapt_new_device<R: Rng + ?Sized>(
    spec: &HierModelSpec,
    q: &MomentGaussian,
    data: &DeviceDataset,
    cfg: &McmcConfig,
    rng: &mut R,
) -> Result<ThetaPosterior> {
    ensure_dim("device features", spec.theta_dim, data.dim())?;
    let phi = q.mean().clone();
    let stats = DeviceStats::new(data);
    let approx = theta_gaussian_approx(spec, &stats, &phi)?;
    if spec.kind.has_gaussian_prior() {
        return Ok(ThetaPosterior::Gaussian(approx));
    }
    let target = |t: &DVector<f64>| spec.log_joint(t, &phi, &stats);
    let chain = adaptive_metropolis(target, approx.mean().clone(), approx.covariance(), cfg, rng)?;
    Ok(ThetaPosterior::Samples(chain))
}
