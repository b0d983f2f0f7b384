//! Comparison methods: FedAvg, Ditto, purely local fits and centralized
//! penalized regression on pooled data.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datasets::{DeviceDataset, FederatedDataset};
use crate::error::{ensure_dim, Error, Result};
use crate::hm1::{local_sgd, BatchSize, Hm1, Hm1Server};
use crate::hm2::mcmc::theta_gaussian_approx;
use crate::hm2::{Ep, EpDevice, EpServer};
use crate::rng::StreamRng;
use crate::runtime::{Axis, FedAlgorithm, FieldShape, FieldSpec, Message, MessageSchema, RoundContext};

/// Per-device coefficients (`d × K`, column `k` for device `k`) after a run.
pub trait Coefficients: FedAlgorithm {
    fn coefficients(&self, server: &Self::Server, devices: &[Self::Device], data: &FederatedDataset) -> Result<DMatrix<f64>>;
}

/// Arithmetic mean of uploaded vectors.
pub fn fed_avg_aggregate(uploads: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = uploads.first().ok_or_else(|| Error::InvalidArgument("no uploads to average".into()))?;
    let mut sum = DVector::zeros(first.len());
    for u in uploads {
        ensure_dim("upload", first.len(), u.len())?;
        sum += u;
    }
    Ok(sum / uploads.len() as f64)
}

fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.max().max(0.0)
}

/// Gradient descent on `‖Y − Xᵀv‖² + (λ/2)‖v − θ̄‖²` from `v = θ̄`.
/// The step is clipped to `1/L`, the inverse gradient Lipschitz constant,
/// so large `λ` cannot make the iteration diverge.
pub fn ditto_personalize(theta_bar: &DVector<f64>, data: &DeviceDataset, lambda: f64, eta: f64, steps: usize) -> Result<DVector<f64>> {
    ensure_dim("global model", data.dim(), theta_bar.len())?;
    if !(lambda >= 0.0) || !(eta > 0.0) {
        return Err(Error::InvalidArgument("ditto needs lambda ≥ 0 and a positive step".into()));
    }
    let gram = data.gram();
    let xy = data.xy();
    let lipschitz = 2.0 * max_eigenvalue(&gram) + lambda;
    let step = if lipschitz > 0.0 { eta.min(1.0 / lipschitz) } else { eta };
    let mut v = theta_bar.clone();
    for _ in 0..steps {
        let grad = (&gram * &v - &xy) * 2.0 + (&v - theta_bar) * lambda;
        v -= grad * step;
    }
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFinite("ditto personalization".into()))
    }
}

/// Minimizer `(XXᵀ + (λ/2)I)⁻¹(XY + (λ/2)θ̄)` of the Ditto objective.
pub fn ditto_closed_form(theta_bar: &DVector<f64>, data: &DeviceDataset, lambda: f64) -> Result<DVector<f64>> {
    let d = data.dim();
    let a = data.gram() + DMatrix::identity(d, d) * (lambda / 2.0);
    let rhs = data.xy() + theta_bar * (lambda / 2.0);
    a.lu().solve(&rhs).ok_or(Error::IrrecoverablySingular { jitter: 0.0 })
}

/// Local SGD from zero, no communication.
pub fn separate_fit(data: &DeviceDataset, eta: f64, steps: usize, batch: BatchSize, rng: &mut StreamRng) -> Result<DVector<f64>> {
    local_sgd(DVector::zeros(data.dim()), data, eta, steps, batch, rng)
}

/// `(XXᵀ + λP)⁻¹XY` where `P` is the identity, minus the intercept entry when
/// `intercept` is set.
pub fn central_ridge(pooled: &DeviceDataset, lambda: f64, intercept: bool) -> Result<DVector<f64>> {
    let d = pooled.dim();
    let mut a = pooled.gram();
    for i in usize::from(intercept)..d {
        a[(i, i)] += lambda;
    }
    a.lu()
        .solve(&pooled.xy())
        .filter(|v| v.iter().all(|x| x.is_finite()))
        .ok_or(Error::IrrecoverablySingular { jitter: 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub coef: DVector<f64>,
    pub sweeps: usize,
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    z.signum() * (z.abs() - t).max(0.0)
}

/// Cyclic coordinate descent for `‖Y − Xᵀθ‖² + λ Σ_j |θ_j|`, the sum skipping
/// the intercept when set. Stops when no coefficient moves more than `1e-8`.
pub fn central_lasso(pooled: &DeviceDataset, lambda: f64, intercept: bool) -> Result<LassoFit> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument("lasso penalty must be non-negative".into()));
    }
    let d = pooled.dim();
    let gram = pooled.gram();
    let xy = pooled.xy();
    let mut theta = DVector::zeros(d);
    // c = Sθ, maintained incrementally
    let mut c = DVector::zeros(d);
    for sweep in 1..=100_000 {
        let mut max_change: f64 = 0.0;
        for j in 0..d {
            let sjj = gram[(j, j)];
            if sjj <= 0.0 {
                continue;
            }
            let rho = xy[j] - c[j] + sjj * theta[j];
            let penalty = if intercept && j == 0 { 0.0 } else { lambda / 2.0 };
            let new = soft_threshold(rho, penalty) / sjj;
            let delta = new - theta[j];
            if delta != 0.0 {
                c += gram.column(j) * delta;
                theta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < 1e-8 {
            return Ok(LassoFit { coef: theta, sweeps: sweep });
        }
    }
    Err(Error::NonFinite("lasso coordinate descent did not converge".into()))
}

/// Largest violation of the lasso subgradient conditions
/// `2X_j r = λ sign θ_j` (θ_j ≠ 0) and `|2X_j r| ≤ λ` (θ_j = 0).
pub fn lasso_kkt_violation(pooled: &DeviceDataset, theta: &DVector<f64>, lambda: f64, intercept: bool) -> f64 {
    let g = (pooled.xy() - pooled.gram() * theta) * 2.0;
    (0..theta.len())
        .map(|j| {
            if intercept && j == 0 {
                g[j].abs()
            } else if theta[j] != 0.0 {
                (g[j] - lambda * theta[j].signum()).abs()
            } else {
                (g[j].abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelVector {
    pub theta: Vec<f64>,
}

impl Message for ModelVector {
    fn schema() -> MessageSchema {
        MessageSchema {
            message: "model_vector",
            fields: vec![FieldSpec {
                name: "theta",
                shape: FieldShape::Vector(Axis::Features),
            }],
        }
    }

    fn values(&self) -> Vec<f64> {
        self.theta.clone()
    }
}

/// Placeholder for algorithms that do not communicate.
#[derive(Debug, Clone, Serialize)]
pub struct Silence;

impl Message for Silence {
    fn schema() -> MessageSchema {
        MessageSchema {
            message: "silence",
            fields: vec![],
        }
    }

    fn values(&self) -> Vec<f64> {
        vec![]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub eta: f64,
    pub batch: BatchSize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            batch: BatchSize::Size(32),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || self.batch == BatchSize::Size(0) {
            return Err(Error::InvalidArgument("SGD needs a positive step and batch".into()));
        }
        Ok(())
    }

    fn params(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("eta".to_string(), self.eta),
            (
                "batch".to_string(),
                match self.batch {
                    BatchSize::Full => 0.0,
                    BatchSize::Size(b) => b as f64,
                },
            ),
        ])
    }
}

/// Global model averaged over participants; every device uses it.
#[derive(Debug, Clone, Default)]
pub struct FedAvg {
    pub sgd: SgdConfig,
}

impl FedAvg {
    pub fn new(sgd: SgdConfig) -> Result<Self> {
        sgd.validate()?;
        Ok(Self { sgd })
    }
}

fn dim_of(data: &[DeviceDataset]) -> Result<usize> {
    data.first()
        .map(|d| d.dim())
        .ok_or_else(|| Error::InvalidArgument("no devices".into()))
}

fn global_round(sgd: &SgdConfig, theta_bar: Vec<f64>, data: &DeviceDataset, ctx: RoundContext, rng: &mut StreamRng) -> Result<ModelVector> {
    let theta = local_sgd(DVector::from_vec(theta_bar), data, sgd.eta, ctx.local_steps, sgd.batch, rng)?;
    Ok(ModelVector {
        theta: theta.iter().copied().collect(),
    })
}

fn average_into(server: &mut DVector<f64>, uploads: Vec<(usize, ModelVector)>) -> Result<()> {
    if uploads.is_empty() {
        return Ok(());
    }
    let vs: Vec<DVector<f64>> = uploads.into_iter().map(|(_, u)| DVector::from_vec(u.theta)).collect();
    *server = fed_avg_aggregate(&vs)?;
    Ok(())
}

impl FedAlgorithm for FedAvg {
    type Server = DVector<f64>;
    type Device = ();
    type Broadcast = ModelVector;
    type Upload = ModelVector;

    fn id(&self) -> &'static str {
        "fedavg"
    }

    fn hyper_parameters(&self) -> BTreeMap<String, f64> {
        self.sgd.params()
    }

    fn init_server(&self, data: &[DeviceDataset], _seed: u64) -> Result<DVector<f64>> {
        Ok(DVector::zeros(dim_of(data)?))
    }

    fn init_device(&self, _: usize, _: &DeviceDataset, _: &DVector<f64>) -> Result<()> {
        Ok(())
    }

    fn broadcast(&self, server: &DVector<f64>, _: usize) -> ModelVector {
        ModelVector {
            theta: server.iter().copied().collect(),
        }
    }

    fn device_update(&self, _: &mut (), data: &DeviceDataset, payload: ModelVector, ctx: RoundContext, rng: &mut StreamRng) -> Result<Option<ModelVector>> {
        global_round(&self.sgd, payload.theta, data, ctx, rng).map(Some)
    }

    fn aggregate(&self, server: &mut DVector<f64>, uploads: Vec<(usize, ModelVector)>) -> Result<()> {
        average_into(server, uploads)
    }
}

impl Coefficients for FedAvg {
    fn coefficients(&self, server: &DVector<f64>, _: &[()], data: &FederatedDataset) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_fn(server.len(), data.k(), |i, _| server[i]))
    }
}

/// FedAvg for the global model plus a proximal personal model per device.
#[derive(Debug, Clone)]
pub struct Ditto {
    pub sgd: SgdConfig,
    pub lambda: f64,
    /// Gradient steps of the final personalization.
    pub personal_steps: usize,
}

impl Default for Ditto {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            lambda: 1.0,
            personal_steps: 200,
        }
    }
}

impl Ditto {
    pub fn new(sgd: SgdConfig, lambda: f64, personal_steps: usize) -> Result<Self> {
        sgd.validate()?;
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument("ditto lambda must be non-negative".into()));
        }
        Ok(Self { sgd, lambda, personal_steps })
    }
}

impl FedAlgorithm for Ditto {
    type Server = DVector<f64>;
    type Device = ();
    type Broadcast = ModelVector;
    type Upload = ModelVector;

    fn id(&self) -> &'static str {
        "ditto"
    }

    fn hyper_parameters(&self) -> BTreeMap<String, f64> {
        let mut p = self.sgd.params();
        p.insert("lambda".into(), self.lambda);
        p.insert("personal_steps".into(), self.personal_steps as f64);
        p
    }

    fn init_server(&self, data: &[DeviceDataset], _seed: u64) -> Result<DVector<f64>> {
        Ok(DVector::zeros(dim_of(data)?))
    }

    fn init_device(&self, _: usize, _: &DeviceDataset, _: &DVector<f64>) -> Result<()> {
        Ok(())
    }

    fn broadcast(&self, server: &DVector<f64>, _: usize) -> ModelVector {
        ModelVector {
            theta: server.iter().copied().collect(),
        }
    }

    fn device_update(&self, _: &mut (), data: &DeviceDataset, payload: ModelVector, ctx: RoundContext, rng: &mut StreamRng) -> Result<Option<ModelVector>> {
        global_round(&self.sgd, payload.theta, data, ctx, rng).map(Some)
    }

    fn aggregate(&self, server: &mut DVector<f64>, uploads: Vec<(usize, ModelVector)>) -> Result<()> {
        average_into(server, uploads)
    }
}

impl Coefficients for Ditto {
    /// Personalizes every device against the final global model.
    fn coefficients(&self, server: &DVector<f64>, _: &[()], data: &FederatedDataset) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(server.len(), data.k());
        for k in 0..data.k() {
            let v = ditto_personalize(server, &data.train(k), self.lambda, self.sgd.eta, self.personal_steps)?;
            out.set_column(k, &v);
        }
        Ok(out)
    }
}

/// Every device fits alone; messages are empty.
#[derive(Debug, Clone, Default)]
pub struct Separate {
    pub sgd: SgdConfig,
}

impl Separate {
    pub fn new(sgd: SgdConfig) -> Result<Self> {
        sgd.validate()?;
        Ok(Self { sgd })
    }
}

impl FedAlgorithm for Separate {
    type Server = ();
    type Device = DVector<f64>;
    type Broadcast = Silence;
    type Upload = Silence;

    fn id(&self) -> &'static str {
        "separate"
    }

    fn hyper_parameters(&self) -> BTreeMap<String, f64> {
        self.sgd.params()
    }

    fn init_server(&self, _: &[DeviceDataset], _: u64) -> Result<()> {
        Ok(())
    }

    fn init_device(&self, _: usize, data: &DeviceDataset, _: &()) -> Result<DVector<f64>> {
        Ok(DVector::zeros(data.dim()))
    }

    fn broadcast(&self, _: &(), _: usize) -> Silence {
        Silence
    }

    fn device_update(&self, theta: &mut DVector<f64>, data: &DeviceDataset, _: Silence, ctx: RoundContext, rng: &mut StreamRng) -> Result<Option<Silence>> {
        *theta = local_sgd(theta.clone(), data, self.sgd.eta, ctx.local_steps, self.sgd.batch, rng)?;
        Ok(Some(Silence))
    }

    fn aggregate(&self, _: &mut (), _: Vec<(usize, Silence)>) -> Result<()> {
        Ok(())
    }
}

impl Coefficients for Separate {
    fn coefficients(&self, _: &(), devices: &[DVector<f64>], data: &FederatedDataset) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(data.dim(), devices.len());
        for (k, t) in devices.iter().enumerate() {
            out.set_column(k, t);
        }
        Ok(out)
    }
}

impl Coefficients for Hm1 {
    fn coefficients(&self, server: &Hm1Server, _: &[()], _: &FederatedDataset) -> Result<DMatrix<f64>> {
        Ok(server.theta.clone())
    }
}

impl Coefficients for Ep {
    /// Coefficient posterior means with `φ` at the mean of `q` (for the
    /// Laplace prior, the mean of its matched-variance normal approximation).
    fn coefficients(&self, server: &EpServer, devices: &[EpDevice], _: &FederatedDataset) -> Result<DMatrix<f64>> {
        let phi = server.posterior()?.mean().clone();
        let mut out = DMatrix::zeros(self.spec.theta_dim, devices.len());
        for (k, dev) in devices.iter().enumerate() {
            out.set_column(k, theta_gaussian_approx(&self.spec, dev.stats(), &phi)?.mean());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate, CaseId, SyntheticCaseSpec};
    use crate::rng;
    use crate::runtime::{run_rounds, RoundConfig};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn device(d: usize, n: usize, seed: u64, noise: f64) -> (DeviceDataset, DVector<f64>) {
        let mut r = rng::stream(seed, "baseline-test", 0);
        let x = DMatrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut r));
        let theta = DVector::from_fn(d, |i, _| i as f64 - 1.0);
        let e = DVector::from_fn(n, |_, _| {
            let z: f64 = StandardNormal.sample(&mut r);
            noise * z
        });
        let y = x.transpose() * &theta + e;
        (DeviceDataset::new("dev001", x, y).unwrap(), theta)
    }

    fn ols(data: &DeviceDataset) -> DVector<f64> {
        data.gram().lu().solve(&data.xy()).unwrap()
    }

    #[test]
    fn fedavg_aggregate_examples() {
        let v = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(fed_avg_aggregate(&[v.clone(), v.clone()]).unwrap(), v);
        let m = fed_avg_aggregate(&[DVector::from_element(1, 0.0), DVector::from_element(1, 2.0)]).unwrap();
        assert_eq!(m[0], 1.0);
        assert!(fed_avg_aggregate(&[]).is_err());
    }

    #[test]
    fn ditto_endpoints() {
        let (data, _) = device(3, 30, 1, 0.3);
        let bar = DVector::from_vec(vec![5.0, -5.0, 0.5]);
        let far = ditto_personalize(&bar, &data, 1e8, 0.01, 200).unwrap();
        assert!((far - &bar).amax() < 1e-3);
        let local = ditto_personalize(&bar, &data, 0.0, 0.01, 5000).unwrap();
        assert!((local - ols(&data)).amax() < 1e-6);
    }

    #[test]
    fn ditto_matches_closed_form() {
        let (data, _) = device(4, 25, 2, 0.5);
        let bar = DVector::from_vec(vec![1.0, 0.0, -1.0, 2.0]);
        for lambda in [0.1, 3.0, 40.0] {
            let gd = ditto_personalize(&bar, &data, lambda, 0.01, 5000).unwrap();
            let cf = ditto_closed_form(&bar, &data, lambda).unwrap();
            assert!((gd - &cf).amax() < 1e-6, "lambda {lambda}");
            // between θ̄ and OLS in the metric of the penalized problem
            let (ol, cb) = ((&cf - ols(&data)).norm(), (&cf - &bar).norm());
            assert!(ol <= (ols(&data) - &bar).norm() && cb <= (ols(&data) - &bar).norm());
        }
    }

    #[test]
    fn separate_recovers_noiseless_truth() {
        let (data, theta) = device(3, 40, 3, 0.0);
        let fit = separate_fit(&data, 0.005, 3000, BatchSize::Full, &mut rng::stream(3, "s", 0)).unwrap();
        assert!((fit - theta).amax() < 1e-6);
    }

    #[test]
    fn separate_equals_fedavg_with_one_device() {
        let (data, _) = device(2, 20, 4, 0.2);
        let fed = FederatedDataset::new(vec![data]).unwrap();
        let cfg = RoundConfig::new(50, 5, 9);
        let sgd = SgdConfig {
            eta: 0.01,
            batch: BatchSize::Full,
        };
        let a = run_rounds(&FedAvg::new(sgd.clone()).unwrap(), &fed, &cfg).unwrap();
        let b = run_rounds(&Separate::new(sgd.clone()).unwrap(), &fed, &cfg).unwrap();
        let ca = FedAvg::new(sgd.clone()).unwrap().coefficients(&a.server, &a.devices, &fed).unwrap();
        let cb = Separate::new(sgd).unwrap().coefficients(&b.server, &b.devices, &fed).unwrap();
        assert!((ca - cb).amax() < 1e-12);
    }

    #[test]
    fn ditto_run_endpoints() {
        let data = generate(&SyntheticCaseSpec::new(CaseId::Hm1II, 2)).unwrap();
        let sgd = SgdConfig {
            eta: 0.001,
            batch: BatchSize::Full,
        };
        let cfg = RoundConfig::new(30, 5, 2);
        let d0 = Ditto::new(sgd.clone(), 0.0, 20_000).unwrap();
        let out = run_rounds(&d0, &data, &cfg).unwrap();
        let personal = d0.coefficients(&out.server, &out.devices, &data).unwrap();
        for k in 0..data.k() {
            let l = ols(&data.train(k));
            assert!((personal.column(k) - l).amax() < 1e-5, "device {k}");
        }
        let dinf = Ditto::new(sgd, 1e9, 200).unwrap();
        let personal = dinf.coefficients(&out.server, &out.devices, &data).unwrap();
        for k in 0..data.k() {
            assert!((personal.column(k) - &out.server).amax() < 1e-3, "{} {}", personal.column(k), out.server);
        }
    }

    #[test]
    fn ridge_examples() {
        let (data, _) = device(3, 30, 5, 0.4);
        assert!((central_ridge(&data, 0.0, false).unwrap() - ols(&data)).amax() < 1e-10);
        let heavy = central_ridge(&data, 1e12, false).unwrap();
        assert!(heavy.amax() < 1e-9);
        let with_int = central_ridge(&data, 1e12, true).unwrap();
        assert!(with_int[0].abs() > 1e-3 || with_int.rows(1, 2).amax() < 1e-9);
    }

    #[test]
    fn lasso_limits_and_kkt() {
        let (data, _) = device(4, 50, 6, 0.3);
        let zero = central_lasso(&data, 0.0, false).unwrap();
        assert!((zero.coef - ols(&data)).amax() < 1e-6);
        let huge = central_lasso(&data, 1e9, true).unwrap();
        assert!(huge.coef.rows(1, 3).iter().all(|v| *v == 0.0));
        for lambda in [0.5, 5.0, 50.0] {
            let fit = central_lasso(&data, lambda, true).unwrap();
            assert!(lasso_kkt_violation(&data, &fit.coef, lambda, true) < 1e-6);
        }
    }

    #[test]
    fn lasso_recovers_case_one_support() {
        let data = generate(&SyntheticCaseSpec::new(CaseId::Hm2I, 1)).unwrap();
        let pooled = data.pooled_train();
        let fit = central_lasso(&pooled, 20.0, false).unwrap();
        let support: Vec<bool> = fit.coef.iter().map(|v| *v != 0.0).collect();
        assert_eq!(support, vec![true, true, false, false, true, false, false, false]);
        assert!(lasso_kkt_violation(&pooled, &fit.coef, 20.0, false) < 1e-6);
    }

    #[test]
    fn messages_are_parameter_only() {
        assert!(ModelVector::schema().is_parameter_only());
        assert!(Silence::schema().is_parameter_only());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn lasso_kkt_holds(seed in 0u64..10_000, lambda in 0.0f64..100.0) {
            let (data, _) = device(5, 30, seed, 1.0);
            let fit = central_lasso(&data, lambda, seed % 2 == 0).unwrap();
            prop_assert!(lasso_kkt_violation(&data, &fit.coef, lambda, seed % 2 == 0) < 1e-6);
        }

        #[test]
        fn fedavg_permutation_invariant(v in proptest::collection::vec(-10.0f64..10.0, 6)) {
            let a: Vec<DVector<f64>> = v.chunks(2).map(|c| DVector::from_column_slice(c)).collect();
            let mut b = a.clone();
            b.reverse();
            let d = fed_avg_aggregate(&a).unwrap() - fed_avg_aggregate(&b).unwrap();
            prop_assert!(d.amax() < 1e-12);
        }
    }
}
