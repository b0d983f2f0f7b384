//! Federated expectation propagation over the shared hyper-parameters.
//!
//! The server owns `q(φ) = p(φ)·Π_k s_k(φ)` in natural form, each device owns
//! its site `s_k`. A device forms the cavity `q / s_k`, tilts it with its
//! marginal likelihood `f_k(φ)`, projects back to a Gaussian by moment
//! matching and uploads a damped natural-parameter delta.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{log_marginal, log_sum_exp, DeviceStats, HierModelSpec, ModelKind, StudentT, TDraws};
use crate::datasets::{DeviceDataset, FederatedDataset};
use crate::error::{Error, Result};
use crate::gaussian::{ensure_pd, symmetrize, MomentGaussian, NaturalGaussian};
use crate::rng::StreamRng;
use crate::runtime::{Axis, FedAlgorithm, FieldShape, FieldSpec, Message, MessageSchema, RoundContext};

/// Smallest rescaling of the summed deltas tried before giving up.
pub const MIN_AGGREGATE_SCALE: f64 = 1.0 / 64.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpConfig {
    /// Step size `η` in `(0, 1]` applied to site updates.
    pub damping: f64,
    /// Importance draws of `φ` per tilted projection.
    pub draws: usize,
    /// Minimum effective sample size as a fraction of `draws`.
    pub ess_floor: f64,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            draws: 2048,
            ess_floor: 0.01,
        }
    }
}

impl EpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!("damping {} outside (0, 1]", self.damping)));
        }
        if self.draws < 2 {
            return Err(Error::InvalidArgument("need at least two importance draws".into()));
        }
        if !(0.0..1.0).contains(&self.ess_floor) {
            return Err(Error::InvalidArgument("ess_floor must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Cavity `q / s`. May be improper.
pub fn cavity(q: &NaturalGaussian, site: &NaturalGaussian) -> Result<NaturalGaussian> {
    q.quotient(site)
}

/// Self-normalized moments of weighted points.
fn weighted_moments(points: &[DVector<f64>], logw: &[f64]) -> Option<(MomentGaussian, f64)> {
    let lse = log_sum_exp(logw);
    if !lse.is_finite() {
        return None;
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - lse).exp()).collect();
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    let p = points[0].len();
    let mut mean = DVector::zeros(p);
    for (x, wi) in points.iter().zip(&w) {
        mean += x * *wi;
    }
    let mut cov = DMatrix::zeros(p, p);
    for (x, wi) in points.iter().zip(&w) {
        let c = x - &mean;
        cov += &c * c.transpose() * *wi;
    }
    let cov = ensure_pd(&symmetrize(&cov), 1e-12).ok()?;
    Some((MomentGaussian::new(mean, cov).ok()?, ess))
}

/// Relative effective sample size above which weights are close enough to
/// uniform for the control-variate correction to pay off.
const CONTROL_VARIATE_ESS: f64 = 0.5;

/// Recentres weighted moments on the exact cavity moments:
/// `m̂_w − m̂ + m` and `Σ̂_w − Σ̂ + Σ`, where hats are plain sample moments of
/// the same draws. Sampling noise shared by both estimates cancels, which
/// matters when a device moves the cavity only slightly.
fn control_variate(cavity: &MomentGaussian, points: &[DVector<f64>], weighted: &MomentGaussian) -> Option<MomentGaussian> {
    let uniform = vec![0.0; points.len()];
    let (plain, _) = weighted_moments(points, &uniform)?;
    let mean = weighted.mean() - plain.mean() + cavity.mean();
    let cov = symmetrize(&(weighted.covariance() - plain.covariance() + cavity.covariance()));
    cov.clone().cholesky()?;
    MomentGaussian::new(mean, cov).ok()
}

fn eval<F>(log_f: &F, x: &DVector<f64>) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    match log_f(x) {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Ok(f64::NEG_INFINITY),
        Err(e) if e.is_numerical() => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// Gaussian projection of the tilted density `cavity(φ)·exp(log_f(φ))`.
///
/// Importance sampling from the cavity first. When the effective sample size
/// drops below `ess_floor·draws`, a second pass samples from a t density
/// centred on the tilted mode with the Newton curvature as scale.
pub fn tilted_project<F, R>(cavity: &MomentGaussian, log_f: F, draws: usize, ess_floor: f64, rng: &mut R) -> Result<MomentGaussian>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
    R: Rng + ?Sized,
{
    let points: Vec<DVector<f64>> = (0..draws).map(|_| cavity.sample(rng)).collect();
    let logw = points.iter().map(|p| eval(&log_f, p)).collect::<Result<Vec<_>>>()?;
    let (lo, hi) = logw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if lo == hi && hi.is_finite() {
        return Ok(cavity.clone());
    }
    let floor = ess_floor * draws as f64;
    let mut best_ess = 0.0;
    if let Some((m, ess)) = weighted_moments(&points, &logw) {
        if ess >= CONTROL_VARIATE_ESS * draws as f64 {
            return Ok(control_variate(cavity, &points, &m).unwrap_or(m));
        }
        if ess >= floor {
            return Ok(m);
        }
        best_ess = ess;
    }

    let log_tilt = |x: &DVector<f64>| -> Result<f64> {
        let c = cavity.log_density(x)?;
        Ok(c + eval(&log_f, x)?)
    };
    if let Some((mode, neg_hess)) = newton_mode(&log_tilt, cavity.mean().clone(), cavity.covariance())? {
        let scale = ensure_pd(&(invert_pd(&neg_hess)? * 1.5), 1e-12)?;
        let proposal = StudentT::new(mode, &scale)?;
        let points: Vec<DVector<f64>> = (0..draws).map(|_| proposal.sample(rng)).collect();
        let logw = points
            .iter()
            .map(|p| Ok(log_tilt(p)? - proposal.log_density(p)))
            .collect::<Result<Vec<_>>>()?;
        if let Some((m, ess)) = weighted_moments(&points, &logw) {
            if ess >= floor {
                return Ok(m);
            }
            best_ess = f64::max(best_ess, ess);
        }
    }
    Err(Error::DegenerateTilt { ess: best_ess, floor })
}

fn invert_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = ensure_pd(m, 1e-12)?
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { context: "curvature" })?;
    Ok(symmetrize(&chol.inverse()))
}

/// Damped Newton ascent with finite-difference derivatives. Returns the mode
/// and the (repaired) negative Hessian there, or `None` if the start is not finite.
fn newton_mode<G>(g: &G, start: DVector<f64>, start_cov: &DMatrix<f64>) -> Result<Option<(DVector<f64>, DMatrix<f64>)>>
where
    G: Fn(&DVector<f64>) -> Result<f64>,
{
    let p = start.len();
    let steps: Vec<f64> = (0..p).map(|i| 1e-3 * start_cov[(i, i)].sqrt().clamp(1e-3, 1.0)).collect();
    let max_step: f64 = (0..p).map(|i| start_cov[(i, i)]).sum::<f64>().sqrt().max(1.0);
    let mut x = start;
    let mut fx = g(&x)?;
    if !fx.is_finite() {
        return Ok(None);
    }
    let curvature = |x: &DVector<f64>, fx: f64| -> Result<Option<(DVector<f64>, DMatrix<f64>)>> {
        let (grad, hess) = fd_derivatives(g, x, fx, &steps)?;
        if grad.iter().chain(hess.iter()).any(|v| !v.is_finite()) {
            return Ok(None);
        }
        let neg = clamp_spectrum(&(-&hess));
        Ok(Some((grad, neg)))
    };
    for _ in 0..100 {
        let Some((grad, neg_hess)) = curvature(&x, fx)? else {
            return Ok(None);
        };
        let mut step = invert_pd(&neg_hess)? * &grad;
        let len = step.norm();
        if len > max_step {
            step *= max_step / len;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand = &x + &step * t;
            let fc = g(&cand)?;
            if fc.is_finite() && fc >= fx {
                moved = (&cand - &x).norm() > 1e-10;
                x = cand;
                fx = fc;
                break;
            }
            t *= 0.5;
        }
        if !moved || (&step * t).norm() < 1e-8 {
            break;
        }
    }
    Ok(curvature(&x, fx)?.map(|(_, neg)| (x, neg)))
}

/// Reflects negative eigenvalues and floors tiny ones so the result is PD.
fn clamp_spectrum(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(m));
    let floor = 1e-6 * eig.eigenvalues.amax().max(1e-6);
    let vals = eig.eigenvalues.map(|v| v.abs().max(floor));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

fn fd_derivatives<G>(g: &G, x: &DVector<f64>, fx: f64, h: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    G: Fn(&DVector<f64>) -> Result<f64>,
{
    let p = x.len();
    let at = |moves: &[(usize, f64)]| {
        let mut y = x.clone();
        for &(i, d) in moves {
            y[i] += d;
        }
        g(&y)
    };
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);
    for i in 0..p {
        let up = at(&[(i, h[i])])?;
        let down = at(&[(i, -h[i])])?;
        grad[i] = (up - down) / (2.0 * h[i]);
        hess[(i, i)] = (up - 2.0 * fx + down) / (h[i] * h[i]);
        for j in 0..i {
            let v = (at(&[(i, h[i]), (j, h[j])])? - at(&[(i, h[i]), (j, -h[j])])? - at(&[(i, -h[i]), (j, h[j])])?
                + at(&[(i, -h[i]), (j, -h[j])])?)
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok((grad, hess))
}

/// Damped natural-parameter change `η·(q_new − q)`.
pub fn site_delta(q_new: &NaturalGaussian, q: &NaturalGaussian, damping: f64) -> Result<NaturalGaussian> {
    Ok(q_new.quotient(q)?.scale(damping))
}

/// `q + s·Σ deltas` with the largest `s ∈ {1, ½, …, 1/64}` keeping the result
/// proper. Returns the new approximation and `s`.
pub fn server_aggregate(q: &NaturalGaussian, deltas: &[NaturalGaussian]) -> Result<(NaturalGaussian, f64)> {
    if deltas.is_empty() {
        return Ok((q.clone(), 1.0));
    }
    let mut total = NaturalGaussian::flat(q.dim());
    for d in deltas {
        total = total.product(d)?;
    }
    let mut s = 1.0;
    let mut last = f64::NAN;
    while s >= MIN_AGGREGATE_SCALE {
        let cand = q.product(&total.scale(s))?;
        if cand.is_finite() && cand.is_proper() {
            return Ok((cand, s));
        }
        last = cand.min_eigenvalue();
        s *= 0.5;
    }
    Err(Error::ImproperAggregate { min_eigenvalue: last })
}

#[derive(Debug, Clone, Serialize)]
pub struct EpBroadcast {
    pub r: DVector<f64>,
    pub q: DMatrix<f64>,
    /// Scale the server applied to this device's last delta.
    pub settle_scale: f64,
}

impl Message for EpBroadcast {
    fn schema() -> MessageSchema {
        MessageSchema {
            message: "hm2.broadcast",
            fields: vec![
                FieldSpec {
                    name: "r",
                    shape: FieldShape::Vector(Axis::Hyper),
                },
                FieldSpec {
                    name: "q",
                    shape: FieldShape::Matrix(Axis::Hyper, Axis::Hyper),
                },
                FieldSpec {
                    name: "settle_scale",
                    shape: FieldShape::Scalar,
                },
            ],
        }
    }

    fn values(&self) -> Vec<f64> {
        self.r.iter().chain(self.q.iter()).copied().chain([self.settle_scale]).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpUpload {
    pub delta_r: DVector<f64>,
    pub delta_q: DMatrix<f64>,
}

impl Message for EpUpload {
    fn schema() -> MessageSchema {
        MessageSchema {
            message: "hm2.upload",
            fields: vec![
                FieldSpec {
                    name: "delta_r",
                    shape: FieldShape::Vector(Axis::Hyper),
                },
                FieldSpec {
                    name: "delta_q",
                    shape: FieldShape::Matrix(Axis::Hyper, Axis::Hyper),
                },
            ],
        }
    }

    fn values(&self) -> Vec<f64> {
        self.delta_r.iter().chain(self.delta_q.iter()).copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct EpServer {
    pub prior: NaturalGaussian,
    pub q: NaturalGaussian,
    pub settle: Vec<f64>,
}

impl EpServer {
    pub fn posterior(&self) -> Result<MomentGaussian> {
        self.q.to_moments()
    }
}

#[derive(Debug, Clone)]
pub struct EpDevice {
    pub site: NaturalGaussian,
    pending: Option<NaturalGaussian>,
    stats: DeviceStats,
}

impl EpDevice {
    pub fn stats(&self) -> &DeviceStats {
        &self.stats
    }

    /// Site with any pending delta applied at the server's scale.
    pub fn settled_site(&self, settle_scale: f64) -> Result<NaturalGaussian> {
        match &self.pending {
            Some(p) => self.site.product(&p.scale(settle_scale)),
            None => Ok(self.site.clone()),
        }
    }
}

impl EpServer {
    /// Cavity of device `k` at the end of a run.
    pub fn device_cavity(&self, k: usize, device: &EpDevice) -> Result<NaturalGaussian> {
        cavity(&self.q, &device.settled_site(self.settle[k])?)
    }
}

#[derive(Debug, Clone)]
pub struct Ep {
    pub spec: HierModelSpec,
    pub config: EpConfig,
}

impl Ep {
    pub fn new(spec: HierModelSpec, config: EpConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        Ok(Self { spec, config })
    }
}

impl FedAlgorithm for Ep {
    type Server = EpServer;
    type Device = EpDevice;
    type Broadcast = EpBroadcast;
    type Upload = EpUpload;

    fn id(&self) -> &'static str {
        "hm2-ep"
    }

    fn hyper_parameters(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("damping".to_string(), self.config.damping),
            ("draws".to_string(), self.config.draws as f64),
            ("ess_floor".to_string(), self.config.ess_floor),
            ("marginal_draws".to_string(), self.spec.marginal_draws as f64),
        ])
    }

    fn init_server(&self, data: &[DeviceDataset], _seed: u64) -> Result<EpServer> {
        if let Some(d) = data.iter().find(|d| d.dim() != self.spec.theta_dim) {
            return Err(Error::DimensionMismatch {
                context: "device features",
                expected: self.spec.theta_dim,
                found: d.dim(),
            });
        }
        Ok(EpServer {
            prior: self.spec.prior_phi.clone(),
            q: self.spec.prior_phi.clone(),
            settle: vec![1.0; data.len()],
        })
    }

    fn init_device(&self, _k: usize, data: &DeviceDataset, _server: &EpServer) -> Result<EpDevice> {
        Ok(EpDevice {
            site: NaturalGaussian::flat(self.spec.phi_dim()),
            pending: None,
            stats: DeviceStats::new(data),
        })
    }

    fn broadcast(&self, server: &EpServer, k: usize) -> EpBroadcast {
        EpBroadcast {
            r: server.q.r().clone(),
            q: server.q.q().clone(),
            settle_scale: server.settle[k],
        }
    }

    fn device_update(
        &self,
        dev: &mut EpDevice,
        _data: &DeviceDataset,
        payload: EpBroadcast,
        _ctx: RoundContext,
        rng: &mut StreamRng,
    ) -> Result<Option<EpUpload>> {
        if let Some(p) = dev.pending.take() {
            dev.site = dev.site.product(&p.scale(payload.settle_scale))?;
        }
        let q = NaturalGaussian::new(payload.r, payload.q)?;
        let cav = cavity(&q, &dev.site)?;
        if !cav.is_proper() {
            return Ok(None);
        }
        let cav = cav.to_moments()?;
        let tdraws = (self.spec.kind == ModelKind::LassoLaplace).then(|| TDraws::new(self.spec.theta_dim, self.spec.marginal_draws, rng));
        let log_f = |phi: &DVector<f64>| log_marginal(phi, &dev.stats, &self.spec, tdraws.as_ref());
        let tilted = match tilted_project(&cav, log_f, self.config.draws, self.config.ess_floor, rng) {
            Ok(t) => t,
            Err(Error::DegenerateTilt { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let delta = site_delta(&NaturalGaussian::from_moments(&tilted)?, &q, self.config.damping)?;
        dev.pending = Some(delta.clone());
        Ok(Some(EpUpload {
            delta_r: delta.r().clone(),
            delta_q: delta.q().clone(),
        }))
    }

    fn aggregate(&self, server: &mut EpServer, uploads: Vec<(usize, EpUpload)>) -> Result<()> {
        let deltas = uploads
            .iter()
            .map(|(_, u)| NaturalGaussian::new(u.delta_r.clone(), u.delta_q.clone()))
            .collect::<Result<Vec<_>>>()?;
        let (q, s) = server_aggregate(&server.q, &deltas)?;
        server.q = q;
        for (k, _) in &uploads {
            server.settle[*k] = s;
        }
        Ok(())
    }

    fn monitors(&self, server: &EpServer, _devices: &[EpDevice], _data: &FederatedDataset) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        if let Ok(m) = server.q.to_moments() {
            for (i, label) in self.spec.layout.labels().iter().enumerate() {
                out.insert(format!("mean:{label}"), m.mean()[i]);
                out.insert(format!("sd:{label}"), m.covariance()[(i, i)].sqrt());
            }
        }
        out
    }
}
