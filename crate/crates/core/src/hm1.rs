//! Covariance-graph structure: device parameters `Θ = [θ_1 … θ_K]` with a
//! matrix-normal prior `Θ ~ MN(0, I_d, Ω)`.
//!
//! Each round a device runs `T` mini-batch SGD steps on its squared loss, then
//! one prior-shrinkage step `θ_k ← θ_k − 2η₂ Σ_i θ_i [Ω⁻¹]_{ik}` using the
//! aggregate the server computed at round start. The server writes the new
//! columns back and blends `Ω ← (1−α)Ω + (α/d)ΘᵀΘ`.
//!
//! When `K > d` the blend has rank-deficient updates, so eigenvalues of `Ω`
//! outside the range of `ΘᵀΘ` decay geometrically and `I − 2η₂Ω⁻¹` loses
//! stability once they drop below `η₂`. The server therefore clamps the
//! spectrum of `Ω` from below at `omega_floor_factor · η₂` (set the factor to
//! 0 to disable).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{DeviceDataset, FederatedDataset};
use crate::error::{ensure_dim, Error, Result};
use crate::gaussian::{jitter_pd, log_det_pd, min_eigenvalue, sym_sqrt, symmetrize};
use crate::metrics::param_error;
use crate::rng::{self, StreamRng};
use crate::runtime::{Axis, FedAlgorithm, FieldShape, FieldSpec, Message, MessageSchema, RoundContext};

/// One local SGD step on `‖Yb − Xbᵀθ‖²`: `θ + 2η₂ Xb(Yb − Xbᵀθ)`.
pub fn local_sgd_step(theta: &DVector<f64>, xb: &DMatrix<f64>, yb: &DVector<f64>, eta2: f64) -> Result<DVector<f64>> {
    ensure_dim("batch rows", theta.len(), xb.nrows())?;
    ensure_dim("batch size", xb.ncols(), yb.len())?;
    let resid = yb - xb.tr_mul(theta);
    let out = theta + xb * resid * (2.0 * eta2);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite("local SGD step".into()))
    }
}

/// `Σ_i θ_i [Ω⁻¹]_{ik}`.
pub fn shrinkage_vector(theta: &DMatrix<f64>, omega_inv: &DMatrix<f64>, k: usize) -> Result<DVector<f64>> {
    ensure_dim("inverse covariance size", theta.ncols(), omega_inv.nrows())?;
    if k >= theta.ncols() {
        return Err(Error::InvalidArgument(format!("device index {k} out of range")));
    }
    Ok(theta * omega_inv.column(k))
}

/// `θ_k − 2η₂ · aggregate`.
pub fn prior_shrinkage(theta_k: &DVector<f64>, aggregate: &DVector<f64>, eta2: f64) -> Result<DVector<f64>> {
    ensure_dim("shrinkage aggregate", theta_k.len(), aggregate.len())?;
    let out = theta_k - aggregate * (2.0 * eta2);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite("prior shrinkage".into()))
    }
}

/// `(1−α)Ω + (α/d)ΘᵀΘ`, symmetrized, jitter-repaired only if it fails to factorize.
pub fn update_omega(omega: &DMatrix<f64>, theta: &DMatrix<f64>, alpha: f64, d: usize) -> Result<DMatrix<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
    }
    ensure_dim("covariance graph size", theta.ncols(), omega.nrows())?;
    let blended = symmetrize(&(omega * (1.0 - alpha) + theta.tr_mul(theta) * (alpha / d as f64)));
    if blended.clone().cholesky().is_some() && min_eigenvalue(&blended) > 0.0 {
        return Ok(blended);
    }
    let scale = blended.diagonal().amax().max(1.0);
    jitter_pd(&blended, 1e-12 * scale)
}

/// Raises every eigenvalue of a symmetric matrix to at least `floor`.
pub fn floor_spectrum(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.min() >= floor {
        return symmetrize(m);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()))
}

/// `Σ_k (1/σ_k²)‖Y_k − X_kᵀθ_k‖² + Tr(ΘΩ⁻¹Θᵀ) + d·log|Ω|`.
pub fn hm1_objective(theta: &DMatrix<f64>, omega: &DMatrix<f64>, data: &[DeviceDataset], sigma_sq: &[f64]) -> Result<f64> {
    ensure_dim("devices", theta.ncols(), data.len())?;
    ensure_dim("noise variances", data.len(), sigma_sq.len())?;
    let chol = omega
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { context: "device covariance" })?;
    let mut total = 0.0;
    for (k, dev) in data.iter().enumerate() {
        let r = dev.y() - dev.predict(&theta.column(k).into_owned());
        total += r.norm_squared() / sigma_sq[k];
    }
    // Tr(Θ Ω⁻¹ Θᵀ) = Σ_rows θ_(j) Ω⁻¹ θ_(j)ᵀ
    let solved = chol.solve(&theta.transpose());
    total += theta.transpose().component_mul(&solved).sum();
    total += theta.nrows() as f64 * log_det_pd(omega)?;
    Ok(total)
}

/// `(ΘᵀΘ)^{1/2} / Tr((ΘᵀΘ)^{1/2})`.
pub fn zhang_omega(theta: &DMatrix<f64>) -> DMatrix<f64> {
    let root = sym_sqrt(&theta.tr_mul(theta));
    let tr = root.trace();
    if tr > 0.0 {
        root / tr
    } else {
        let k = theta.ncols();
        DMatrix::identity(k, k) / k as f64
    }
}

/// Stationary point of the objective in `Θ` for fixed `Ω`: solves the `dK`
/// system `(blockdiag{X_kX_kᵀ/σ_k²} + Ω⁻¹ ⊗ I_d) vec(Θ) = stack{X_kY_k/σ_k²}`.
pub fn closed_form_map(data: &[DeviceDataset], omega: &DMatrix<f64>, sigma_sq: &[f64]) -> Result<DMatrix<f64>> {
    let k = data.len();
    ensure_dim("covariance graph size", k, omega.nrows())?;
    ensure_dim("noise variances", k, sigma_sq.len())?;
    let d = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("no devices".into()))?
        .dim();
    let omega_inv = omega
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { context: "device covariance" })?
        .inverse();
    let mut a = DMatrix::zeros(d * k, d * k);
    let mut b = DVector::zeros(d * k);
    for (i, dev) in data.iter().enumerate() {
        let mut block = a.view_mut((i * d, i * d), (d, d));
        block += dev.gram() / sigma_sq[i];
        b.rows_mut(i * d, d).copy_from(&(dev.xy() / sigma_sq[i]));
        for j in 0..k {
            for t in 0..d {
                a[(i * d + t, j * d + t)] += omega_inv[(i, j)];
            }
        }
    }
    let sol = a
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { context: "closed-form system" })?
        .solve(&b);
    Ok(DMatrix::from_column_slice(d, k, sol.as_slice()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    Full,
    /// `min(b, N_k)` observations per step.
    Size(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hm1Config {
    /// Step size of local SGD.
    pub eta_sgd: f64,
    /// Step size of prior shrinkage.
    pub eta_shrink: f64,
    pub alpha: f64,
    pub batch: BatchSize,
    /// Standard deviation of the random initial `Θ`.
    pub init_sd: f64,
    /// Lower bound on eigenvalues of `Ω`, as a multiple of `eta_shrink`.
    pub omega_floor_factor: f64,
    /// Keep `Ω` fixed at its initial value.
    pub fixed_omega: bool,
    #[serde(skip)]
    pub initial_omega: Option<DMatrix<f64>>,
}

impl Default for Hm1Config {
    fn default() -> Self {
        Self {
            eta_sgd: 0.01,
            eta_shrink: 0.01,
            alpha: 0.1,
            batch: BatchSize::Size(32),
            init_sd: 0.1,
            omega_floor_factor: 10.0,
            fixed_omega: false,
            initial_omega: None,
        }
    }
}

impl Hm1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.eta_sgd > 0.0) || !(self.eta_shrink > 0.0) {
            return bad("step sizes must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if self.batch == BatchSize::Size(0) {
            return bad("batch size must be positive");
        }
        if !(self.init_sd >= 0.0) || !(self.omega_floor_factor >= 0.0) {
            return bad("init_sd and omega_floor_factor must be non-negative");
        }
        Ok(())
    }
}

/// Server state: the full `Θ`, `Ω` and the cached `Ω⁻¹`.
#[derive(Debug, Clone)]
pub struct Hm1Server {
    pub theta: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub omega_inv: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Hm1Broadcast {
    pub theta_k: Vec<f64>,
    pub aggregate: Vec<f64>,
}

impl Message for Hm1Broadcast {
    fn schema() -> MessageSchema {
        MessageSchema {
            message: "hm1.broadcast",
            fields: vec![
                FieldSpec {
                    name: "theta_k",
                    shape: FieldShape::Vector(Axis::Features),
                },
                FieldSpec {
                    name: "aggregate",
                    shape: FieldShape::Vector(Axis::Features),
                },
            ],
        }
    }

    fn values(&self) -> Vec<f64> {
        self.theta_k.iter().chain(&self.aggregate).copied().collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Hm1Upload {
    pub theta_k: Vec<f64>,
}

impl Message for Hm1Upload {
    fn schema() -> MessageSchema {
        MessageSchema {
            message: "hm1.upload",
            fields: vec![FieldSpec {
                name: "theta_k",
                shape: FieldShape::Vector(Axis::Features),
            }],
        }
    }

    fn values(&self) -> Vec<f64> {
        self.theta_k.clone()
    }
}

/// Runs `steps` mini-batch SGD steps. Batches walk a fresh permutation of the
/// device's rows, wrapping around when exhausted.
pub fn local_sgd(theta: DVector<f64>, data: &DeviceDataset, eta: f64, steps: usize, batch: BatchSize, rng: &mut StreamRng) -> Result<DVector<f64>> {
    let n = data.n();
    if n == 0 {
        return Ok(theta);
    }
    let b = match batch {
        BatchSize::Full => n,
        BatchSize::Size(b) => b.min(n),
    };
    let mut theta = theta;
    if b == n {
        for _ in 0..steps {
            theta = local_sgd_step(&theta, data.x(), data.y(), eta)?;
        }
        return Ok(theta);
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut idx = vec![0; b];
    for t in 0..steps {
        for (i, slot) in idx.iter_mut().enumerate() {
            *slot = perm[(t * b + i) % n];
        }
        let xb = data.x().select_columns(&idx);
        let yb = DVector::from_iterator(b, idx.iter().map(|&i| data.y()[i]));
        theta = local_sgd_step(&theta, &xb, &yb, eta)?;
    }
    Ok(theta)
}

/// The covariance-graph algorithm.
#[derive(Debug, Clone, Default)]
pub struct Hm1 {
    pub config: Hm1Config,
}

impl Hm1 {
    pub fn new(config: Hm1Config) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn refresh_inverse(&self, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(omega
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { context: "device covariance" })?
            .inverse())
    }
}

impl FedAlgorithm for Hm1 {
    type Server = Hm1Server;
    type Device = ();
    type Broadcast = Hm1Broadcast;
    type Upload = Hm1Upload;

    fn id(&self) -> &'static str {
        "hm1"
    }

    fn hyper_parameters(&self) -> BTreeMap<String, f64> {
        let c = &self.config;
        BTreeMap::from([
            ("alpha".into(), c.alpha),
            ("eta_sgd".into(), c.eta_sgd),
            ("eta_shrink".into(), c.eta_shrink),
            (
                "batch".into(),
                match c.batch {
                    BatchSize::Full => 0.0,
                    BatchSize::Size(b) => b as f64,
                },
            ),
            ("init_sd".into(), c.init_sd),
            ("omega_floor_factor".into(), c.omega_floor_factor),
            ("fixed_omega".into(), f64::from(u8::from(c.fixed_omega))),
        ])
    }

    fn init_server(&self, data: &[DeviceDataset], seed: u64) -> Result<Hm1Server> {
        let (d, k) = (data[0].dim(), data.len());
        let mut r = rng::stream(seed, "hm1-init", 0);
        let normal = Normal::new(0.0, self.config.init_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
        let theta = if self.config.init_sd > 0.0 {
            DMatrix::from_fn(d, k, |_, _| normal.sample(&mut r))
        } else {
            DMatrix::zeros(d, k)
        };
        let omega = match &self.config.initial_omega {
            Some(o) => {
                ensure_dim("initial covariance graph", k, o.nrows())?;
                symmetrize(o)
            }
            None => DMatrix::identity(k, k),
        };
        let omega_inv = self.refresh_inverse(&omega)?;
        Ok(Hm1Server { theta, omega, omega_inv })
    }

    fn init_device(&self, _: usize, _: &DeviceDataset, _: &Hm1Server) -> Result<()> {
        Ok(())
    }

    fn broadcast(&self, s: &Hm1Server, k: usize) -> Hm1Broadcast {
        Hm1Broadcast {
            theta_k: s.theta.column(k).iter().copied().collect(),
            aggregate: (&s.theta * s.omega_inv.column(k)).iter().copied().collect(),
        }
    }

    fn device_update(&self, _: &mut (), data: &DeviceDataset, payload: Hm1Broadcast, ctx: RoundContext, rng: &mut StreamRng) -> Result<Option<Hm1Upload>> {
        let theta = DVector::from_vec(payload.theta_k);
        let theta = local_sgd(theta, data, self.config.eta_sgd, ctx.local_steps, self.config.batch, rng)?;
        let theta = prior_shrinkage(&theta, &DVector::from_vec(payload.aggregate), self.config.eta_shrink)?;
        Ok(Some(Hm1Upload {
            theta_k: theta.iter().copied().collect(),
        }))
    }

    fn aggregate(&self, s: &mut Hm1Server, uploads: Vec<(usize, Hm1Upload)>) -> Result<()> {
        for (k, up) in uploads {
            s.theta.set_column(k, &DVector::from_vec(up.theta_k));
        }
        if self.config.fixed_omega {
            return Ok(());
        }
        let mut omega = update_omega(&s.omega, &s.theta, self.config.alpha, s.theta.nrows())?;
        if self.config.omega_floor_factor > 0.0 {
            omega = floor_spectrum(&omega, self.config.omega_floor_factor * self.config.eta_shrink);
        }
        s.omega_inv = self.refresh_inverse(&omega)?;
        s.omega = omega;
        Ok(())
    }

    fn monitors(&self, s: &Hm1Server, _: &[()], data: &FederatedDataset) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        let train = data.train_devices();
        if let Ok(obj) = hm1_objective(&s.theta, &s.omega, &train, &vec![1.0; train.len()]) {
            out.insert("objective".into(), obj);
        }
        if let Some(truth) = &data.true_theta {
            out.insert("param_error".into(), param_error(&s.theta, truth));
        }
        out
    }
}
