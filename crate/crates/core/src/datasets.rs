//! Federated datasets: synthetic simulation cases, CSV ingestion, polynomial
//! features and train/test splitting.
//!
//! Design matrices follow the columns-as-observations convention: `X` is
//! `d × N` and `Y` has length `N`, so the linear model reads `Y = Xᵀθ + ε`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::gaussian::{random_pd, MatrixNormalSpec};
use crate::rng;

/// One device's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDataset {
    id: String,
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl DeviceDataset {
    pub fn new(id: impl Into<String>, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let id = id.into();
        if y.is_empty() {
            return Err(Error::EmptyDevice(id));
        }
        Self::build(id, x, y)
    }

    /// A device with no observations. Useful for prior-only queries.
    pub fn empty(id: impl Into<String>, dim: usize) -> Self {
        Self {
            id: id.into(),
            x: DMatrix::zeros(dim, 0),
            y: DVector::zeros(0),
        }
    }

    fn build(id: String, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        ensure_dim("device observations", x.ncols(), y.len())?;
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("data of device {id}")));
        }
        Ok(Self { id, x, y })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Observations at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            id: self.id.clone(),
            x: self.x.select_columns(indices),
            y: DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.y[i])),
        }
    }

    /// `X Xᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.x * self.x.transpose()
    }

    /// `X Y`.
    pub fn xy(&self) -> DVector<f64> {
        &self.x * &self.y
    }

    /// Predictions `Xᵀθ`.
    pub fn predict(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.x.tr_mul(theta)
    }
}

/// Train/test index sets of one device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Devices sharing a feature dimension, with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub devices: Vec<DeviceDataset>,
    pub true_theta: Option<DMatrix<f64>>,
    pub true_omega: Option<DMatrix<f64>>,
    pub true_phi: Option<BTreeMap<String, f64>>,
    pub splits: Option<Vec<Split>>,
    pub standardizer: Option<Standardizer>,
    pub case: Option<String>,
    pub seed: Option<u64>,
}

impl FederatedDataset {
    pub fn new(devices: Vec<DeviceDataset>) -> Result<Self> {
        let first = devices
            .first()
            .ok_or_else(|| Error::InvalidArgument("a federated dataset needs at least one device".into()))?;
        let d = first.dim();
        for dev in &devices {
            ensure_dim("device feature dimension", d, dev.dim())?;
        }
        Ok(Self {
            devices,
            true_theta: None,
            true_omega: None,
            true_phi: None,
            splits: None,
            standardizer: None,
            case: None,
            seed: None,
        })
    }

    pub fn k(&self) -> usize {
        self.devices.len()
    }

    pub fn dim(&self) -> usize {
        self.devices[0].dim()
    }

    pub fn with_truth(mut self, theta: DMatrix<f64>) -> Result<Self> {
        ensure_dim("true theta rows", self.dim(), theta.nrows())?;
        ensure_dim("true theta cols", self.k(), theta.ncols())?;
        self.true_theta = Some(theta);
        Ok(self)
    }

    pub fn with_splits(mut self, splits: Vec<Split>) -> Result<Self> {
        ensure_dim("splits", self.k(), splits.len())?;
        for (dev, s) in self.devices.iter().zip(&splits) {
            if s.train.iter().chain(&s.test).any(|&i| i >= dev.n()) {
                return Err(Error::InvalidArgument(format!("split index out of range for device {}", dev.id())));
            }
        }
        self.splits = Some(splits);
        Ok(self)
    }

    /// Training part of device `k` (everything when no split is set).
    pub fn train(&self, k: usize) -> DeviceDataset {
        match &self.splits {
            Some(s) => self.devices[k].subset(&s[k].train),
            None => self.devices[k].clone(),
        }
    }

    /// Held-out part of device `k`, if a split is set.
    pub fn test(&self, k: usize) -> Option<DeviceDataset> {
        self.splits.as_ref().map(|s| self.devices[k].subset(&s[k].test))
    }

    pub fn train_devices(&self) -> Vec<DeviceDataset> {
        (0..self.k()).map(|k| self.train(k)).collect()
    }

    pub fn test_devices(&self) -> Option<Vec<DeviceDataset>> {
        self.splits.as_ref()?;
        Some((0..self.k()).map(|k| self.test(k).expect("split present")).collect())
    }

    /// Training rows of all devices concatenated.
    pub fn pooled_train(&self) -> DeviceDataset {
        let parts = self.train_devices();
        let n: usize = parts.iter().map(|p| p.n()).sum();
        let mut x = DMatrix::zeros(self.dim(), n);
        let mut y = DVector::zeros(n);
        let mut at = 0;
        for p in &parts {
            x.columns_mut(at, p.n()).copy_from(p.x());
            y.rows_mut(at, p.n()).copy_from(p.y());
            at += p.n();
        }
        DeviceDataset {
            id: "pooled".into(),
            x,
            y,
        }
    }

    /// Writes one CSV per device (`x1..xd, y, split`) and `manifest.json`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, dev) in self.devices.iter().enumerate() {
            let path = dir.join(format!("{}.csv", dev.id()));
            let mut w = csv::Writer::from_path(&path)?;
            let mut header: Vec<String> = (1..=dev.dim()).map(|j| format!("x{j}")).collect();
            header.push("y".into());
            header.push("split".into());
            w.write_record(&header)?;
            let mut roles = vec![if self.splits.is_some() { "unused" } else { "all" }; dev.n()];
            if let Some(s) = &self.splits {
                s[k].train.iter().for_each(|&i| roles[i] = "train");
                s[k].test.iter().for_each(|&i| roles[i] = "test");
            }
            for i in 0..dev.n() {
                let mut row: Vec<String> = dev.x().column(i).iter().map(|v| format_f64(*v)).collect();
                row.push(format_f64(dev.y()[i]));
                row.push(roles[i].into());
                w.write_record(&row)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        let manifest = DatasetManifest {
            case: self.case.clone(),
            seed: self.seed,
            dim: self.dim(),
            devices: self
                .devices
                .iter()
                .map(|d| DeviceEntry {
                    id: d.id().to_string(),
                    rows: d.n(),
                })
                .collect(),
            true_theta: self.true_theta.as_ref().map(matrix_rows),
            true_omega: self.true_omega.as_ref().map(matrix_rows),
            true_phi: self.true_phi.clone(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

#[derive(Serialize)]
struct DatasetManifest {
    case: Option<String>,
    seed: Option<u64>,
    dim: usize,
    devices: Vec<DeviceEntry>,
    true_theta: Option<Vec<Vec<f64>>>,
    true_omega: Option<Vec<Vec<f64>>>,
    true_phi: Option<BTreeMap<String, f64>>,
}

#[derive(Serialize)]
struct DeviceEntry {
    id: String,
    rows: usize,
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Shortest round-tripping decimal representation.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Built-in simulation cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CaseId {
    Hm1I,
    Hm1II,
    Hm1III,
    Hm1IV,
    Hm2I,
    Hm2II,
    Hm2III,
    Uq100,
    /// Heterogeneous polynomial-trend devices with a time-ordered split.
    PolySurrogate,
}

impl CaseId {
    pub const ALL: [CaseId; 9] = [
        CaseId::Hm1I,
        CaseId::Hm1II,
        CaseId::Hm1III,
        CaseId::Hm1IV,
        CaseId::Hm2I,
        CaseId::Hm2II,
        CaseId::Hm2III,
        CaseId::Uq100,
        CaseId::PolySurrogate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CaseId::Hm1I => "HM1-I",
            CaseId::Hm1II => "HM1-II",
            CaseId::Hm1III => "HM1-III",
            CaseId::Hm1IV => "HM1-IV",
            CaseId::Hm2I => "HM2-I",
            CaseId::Hm2II => "HM2-II",
            CaseId::Hm2III => "HM2-III",
            CaseId::Uq100 => "UQ-100",
            CaseId::PolySurrogate => "POLY-SURROGATE",
        }
    }

    /// Devices over which the A-RMSE of this case is reported.
    pub fn eval_devices(self, k: usize) -> Vec<usize> {
        match self {
            CaseId::Hm1I => vec![0],
            CaseId::Hm1II => (0..k.min(30)).collect(),
            _ => (0..k).collect(),
        }
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaseId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CaseId::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownCase(s.to_string()))
    }
}

impl TryFrom<String> for CaseId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CaseId> for String {
    fn from(c: CaseId) -> String {
        c.as_str().to_string()
    }
}

/// Optional changes to a case's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseOverrides {
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub sample_sizes: Option<Vec<usize>>,
    pub noise_sd: Option<f64>,
    pub test_size: Option<usize>,
    /// Add observation noise to held-out targets too.
    #[serde(default)]
    pub noisy_test: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCaseSpec {
    pub case: CaseId,
    pub seed: u64,
    #[serde(default)]
    pub overrides: CaseOverrides,
}

impl SyntheticCaseSpec {
    pub fn new(case: CaseId, seed: u64) -> Self {
        Self {
            case,
            seed,
            overrides: CaseOverrides::default(),
        }
    }
}

/// Generates any built-in case.
pub fn generate(spec: &SyntheticCaseSpec) -> Result<FederatedDataset> {
    match spec.case {
        CaseId::Hm1I | CaseId::Hm1II | CaseId::Hm1III | CaseId::Hm1IV => gen_hm1_case(spec),
        CaseId::Hm2I | CaseId::Hm2II | CaseId::Hm2III => gen_hm2_case(spec),
        CaseId::Uq100 => gen_uq(spec),
        CaseId::PolySurrogate => gen_poly_surrogate(spec),
    }
}

struct Layout {
    k: usize,
    d: usize,
    sizes: Vec<usize>,
    noise_sd: f64,
    test_size: usize,
}

fn resolve(spec: &SyntheticCaseSpec, k: usize, d: usize, sizes: impl Fn(usize) -> Vec<usize>, noise: f64, test: usize) -> Result<Layout> {
    let o = &spec.overrides;
    let k = o.k.unwrap_or(k);
    let d = o.d.unwrap_or(d);
    if k == 0 || d == 0 {
        return Err(Error::InvalidArgument("K and d must be positive".into()));
    }
    let sizes = match &o.sample_sizes {
        Some(s) => {
            ensure_dim("sample sizes", k, s.len())?;
            s.clone()
        }
        None => sizes(k),
    };
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("sample sizes must be positive".into()));
    }
    let noise_sd = o.noise_sd.unwrap_or(noise);
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(Error::InvalidArgument("noise sd must be non-negative".into()));
    }
    Ok(Layout {
        k,
        d,
        sizes,
        noise_sd,
        test_size: o.test_size.unwrap_or(test),
    })
}

/// Devices with standard-normal inputs: train rows first, then held-out rows.
fn simulate(spec: &SyntheticCaseSpec, layout: &Layout, theta: &DMatrix<f64>) -> Result<FederatedDataset> {
    let data_seed = rng::derive_seed(spec.seed, "data");
    let mut devices = Vec::with_capacity(layout.k);
    let mut splits = Vec::with_capacity(layout.k);
    for k in 0..layout.k {
        let id = format!("dev{:03}", k + 1);
        let mut r = rng::device_stream(data_seed, &id);
        let (n, m) = (layout.sizes[k], layout.test_size);
        let x = DMatrix::from_fn(layout.d, n + m, |_, _| StandardNormal.sample(&mut r));
        let mean = x.tr_mul(&theta.column(k));
        let y = DVector::from_fn(n + m, |i, _| {
            let eps: f64 = StandardNormal.sample(&mut r);
            if i < n || spec.overrides.noisy_test {
                mean[i] + layout.noise_sd * eps
            } else {
                mean[i]
            }
        });
        devices.push(DeviceDataset::new(id, x, y)?);
        splits.push(Split {
            train: (0..n).collect(),
            test: (n..n + m).collect(),
        });
    }
    let mut ds = FederatedDataset::new(devices)?.with_truth(theta.clone())?;
    if layout.test_size > 0 {
        ds = ds.with_splits(splits)?;
    } else {
        ds.splits = Some(splits);
    }
    ds.case = Some(spec.case.to_string());
    ds.seed = Some(spec.seed);
    Ok(ds)
}

/// Covariance-graph cases: `Θ ~ MN(0, I_d, Ω)`.
pub fn gen_hm1_case(spec: &SyntheticCaseSpec) -> Result<FederatedDataset> {
    let layout = match spec.case {
        CaseId::Hm1I => {
            if spec.overrides.k.is_some_and(|k| k != 2) {
                return Err(Error::InvalidArgument("this case has exactly 2 devices".into()));
            }
            resolve(spec, 2, 5, |_| vec![20, 200], 0.05, 1000)?
        }
        CaseId::Hm1II => resolve(spec, 100, 8, |k| (0..k).map(|i| if i < 30 { 40 } else { 275 }).collect(), 0.1, 1000)?,
        CaseId::Hm1III => resolve(spec, 100, 8, |k| vec![20; k], 0.1, 1000)?,
        CaseId::Hm1IV => resolve(spec, 100, 8, |k| vec![200; k], 0.1, 1000)?,
        other => return Err(Error::UnknownCase(other.to_string())),
    };
    let omega = match spec.case {
        CaseId::Hm1I => DMatrix::from_row_slice(2, 2, &[1.0, 0.7, 0.7, 1.0]),
        _ => random_pd(layout.k, rng::derive_seed(spec.seed, "omega")),
    };
    let mn = MatrixNormalSpec::new(DMatrix::zeros(layout.d, layout.k), DMatrix::identity(layout.d, layout.d), omega.clone())?;
    let theta = mn.sample_with(&mut rng::stream(spec.seed, "theta", 0));
    let mut ds = simulate(spec, &layout, &theta)?;
    ds.true_omega = Some(omega);
    Ok(ds)
}

/// Shared sparse coefficient cases.
pub fn gen_hm2_case(spec: &SyntheticCaseSpec) -> Result<FederatedDataset> {
    let (layout, base): (Layout, Vec<f64>) = match spec.case {
        CaseId::Hm2I => (
            resolve(spec, 10, 8, |k| vec![100; k], 0.05, 1000)?,
            vec![3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0],
        ),
        CaseId::Hm2II => (
            resolve(spec, 10, 8, |k| (0..k).map(|i| if i < 2 { 20 } else { 200 }).collect(), 0.05, 1000)?,
            vec![3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0],
        ),
        CaseId::Hm2III => (
            resolve(spec, 20, 30, |k| vec![40; k], 0.05, 400)?,
            [3.0; 10].iter().chain(&[0.0; 10]).chain(&[3.0; 10]).copied().collect(),
        ),
        other => return Err(Error::UnknownCase(other.to_string())),
    };
    ensure_dim("coefficient dimension override", base.len(), layout.d)?;
    let col = DVector::from_vec(base);
    let theta = DMatrix::from_fn(layout.d, layout.k, |i, _| col[i]);
    simulate(spec, &layout, &theta)
}

pub const UQ_MEAN: [f64; 4] = [1.0, 3.0, 0.5, 2.0];
pub const UQ_VAR: [f64; 4] = [1.17, 2.35, 2.52, 0.67];

/// Device coefficients drawn around a known mean: `θ_k ~ N(μ, diag(v))`.
pub fn gen_uq(spec: &SyntheticCaseSpec) -> Result<FederatedDataset> {
    if spec.case != CaseId::Uq100 {
        return Err(Error::UnknownCase(spec.case.to_string()));
    }
    let layout = resolve(spec, 100, 4, |k| vec![100; k], 0.1, 100)?;
    ensure_dim("coefficient dimension override", 4, layout.d)?;
    let mut r = rng::stream(spec.seed, "theta", 0);
    let theta = DMatrix::from_fn(4, layout.k, |i, _| {
        let z: f64 = StandardNormal.sample(&mut r);
        UQ_MEAN[i] + UQ_VAR[i].sqrt() * z
    });
    let mut ds = simulate(spec, &layout, &theta)?;
    let mut phi = BTreeMap::new();
    for i in 0..4 {
        phi.insert(format!("mu{}", i + 1), UQ_MEAN[i]);
        phi.insert(format!("var{}", i + 1), UQ_VAR[i]);
    }
    ds.true_phi = Some(phi);
    Ok(ds)
}

pub const POLY_TREND: [f64; 4] = [1.0, -2.0, 1.5, 0.5];

/// Cubic time trends per device around a common trend, deviations
/// `MN(0, I, randomPD(K))`, observed on an even time grid and split by time.
pub fn gen_poly_surrogate(spec: &SyntheticCaseSpec) -> Result<FederatedDataset> {
    let layout = resolve(spec, 100, 4, |k| vec![30; k], 0.25, 0)?;
    let order = layout.d - 1;
    if order == 0 {
        return Err(Error::InvalidArgument("polynomial order must be at least 1".into()));
    }
    let omega = random_pd(layout.k, rng::derive_seed(spec.seed, "omega"));
    let trend = DVector::from_fn(layout.d, |i, _| POLY_TREND.get(i).copied().unwrap_or(0.0));
    let mean = DMatrix::from_fn(layout.d, layout.k, |i, _| trend[i]);
    let theta = MatrixNormalSpec::new(mean, DMatrix::identity(layout.d, layout.d), omega.clone())?
        .sample_with(&mut rng::stream(spec.seed, "theta", 0));
    let data_seed = rng::derive_seed(spec.seed, "data");
    let noise = Normal::new(0.0, layout.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let mut devices = Vec::with_capacity(layout.k);
    for k in 0..layout.k {
        let id = format!("dev{:03}", k + 1);
        let mut r = rng::device_stream(data_seed, &id);
        let n = layout.sizes[k];
        let t = DVector::from_fn(n, |i, _| i as f64);
        let x = polynomial_design(&t, order, true);
        let clean = x.tr_mul(&theta.column(k));
        let y = clean.map(|v| if layout.noise_sd > 0.0 { v + noise.sample(&mut r) } else { v });
        devices.push(DeviceDataset::new(id, x, y)?);
    }
    let mut ds = FederatedDataset::new(devices)?.with_truth(theta)?;
    ds.true_omega = Some(omega);
    ds.case = Some(spec.case.to_string());
    ds.seed = Some(spec.seed);
    train_test_split(ds, SplitPolicy::TimePrefix(0.6), spec.seed)
}

/// `(order+1) × N` design with row `j` holding `tʲ`. With `standardize`, `t`
/// is first mapped affinely onto `[0, 1]`.
pub fn polynomial_design(t: &DVector<f64>, order: usize, standardize: bool) -> DMatrix<f64> {
    let t = if standardize && !t.is_empty() {
        let (lo, hi) = (t.min(), t.max());
        if hi > lo {
            t.map(|v| (v - lo) / (hi - lo))
        } else {
            DVector::zeros(t.len())
        }
    } else {
        t.clone()
    };
    DMatrix::from_fn(order + 1, t.len(), |j, i| t[i].powi(j as i32))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "fraction", rename_all = "snake_case")]
pub enum SplitPolicy {
    FractionPerDevice(f64),
    TimePrefix(f64),
}

impl SplitPolicy {
    fn fraction(self) -> f64 {
        match self {
            SplitPolicy::FractionPerDevice(p) | SplitPolicy::TimePrefix(p) => p,
        }
    }
}

/// Number of training rows: `⌈pN⌉`, leaving at least one held-out row.
pub fn train_count(n: usize, p: f64) -> usize {
    ((p * n as f64).ceil() as usize).clamp(1, n - 1)
}

/// Populates per-device train/test indices.
pub fn train_test_split(mut ds: FederatedDataset, policy: SplitPolicy, seed: u64) -> Result<FederatedDataset> {
    let p = policy.fraction();
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {p} outside (0, 1)")));
    }
    let split_seed = rng::derive_seed(seed, "split");
    let mut splits = Vec::with_capacity(ds.k());
    for dev in &ds.devices {
        let n = dev.n();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("device {} has fewer than 2 observations", dev.id())));
        }
        let m = train_count(n, p);
        let split = match policy {
            SplitPolicy::TimePrefix(_) => Split {
                train: (0..m).collect(),
                test: (m..n).collect(),
            },
            SplitPolicy::FractionPerDevice(_) => {
                let mut r = rng::device_stream(split_seed, dev.id());
                let mut train = index::sample(&mut r, n, m).into_vec();
                train.sort_unstable();
                let mut mask = vec![false; n];
                for &i in &train {
                    mask[i] = true;
                }
                let test = (0..n).filter(|&i| !mask[i]).collect();
                Split { train, test }
            }
        };
        splits.push(split);
    }
    ds.splits = None;
    ds.with_splits(splits)
}

/// Column means and standard deviations of standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Row index in `X` of each standardized feature.
    pub rows: Vec<usize>,
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    /// Original value of standardized feature `j`.
    pub fn invert(&self, j: usize, z: f64) -> f64 {
        z * self.sds[j] + self.means[j]
    }

    fn apply(&self, x: &mut DMatrix<f64>) {
        for (j, &row) in self.rows.iter().enumerate() {
            for v in x.row_mut(row).iter_mut() {
                *v = (*v - self.means[j]) / self.sds[j];
            }
        }
    }

    /// Recovers the raw design matrix.
    pub fn unstandardize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, &row) in self.rows.iter().enumerate() {
            for v in out.row_mut(row).iter_mut() {
                *v = self.invert(j, *v);
            }
        }
        out
    }
}

/// How to turn a flat CSV into devices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub device_column: String,
    pub target_column: String,
    /// Nominal columns, one-hot encoded with the first (sorted) level dropped.
    #[serde(default)]
    pub dummy_encode: Vec<String>,
    #[serde(default)]
    pub standardize: bool,
    /// Columns ignored entirely.
    #[serde(default)]
    pub drop: Vec<String>,
}

/// Loads a CSV, groups rows by device and builds `X` with a leading
/// intercept row. When `split` is given, standardization uses training rows only.
pub fn load_csv_federated(path: &Path, schema: &CsvSchema, split: Option<(SplitPolicy, u64)>) -> Result<FederatedDataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let dev_col = find(&schema.device_column)?;
    let target_col = find(&schema.target_column)?;
    for c in schema.dummy_encode.iter().chain(&schema.drop) {
        find(c)?;
    }
    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;

    let parse = |col: usize, row: usize, rec: &csv::StringRecord| -> Result<f64> {
        let raw = rec.get(col).unwrap_or("").trim();
        raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::NonNumeric {
            column: headers[col].clone(),
            row: row + 1,
            value: raw.to_string(),
        })
    };

    // feature plan: (name, source column, Some(level) for dummies)
    let mut plan: Vec<(String, usize, Option<String>)> = Vec::new();
    for (c, name) in headers.iter().enumerate() {
        if c == dev_col || c == target_col || schema.drop.contains(name) {
            continue;
        }
        if schema.dummy_encode.contains(name) {
            let mut levels: Vec<String> = records.iter().map(|r| r.get(c).unwrap_or("").trim().to_string()).collect();
            levels.sort();
            levels.dedup();
            for level in levels.into_iter().skip(1) {
                plan.push((format!("{name}_{level}"), c, Some(level)));
            }
        } else {
            plan.push((name.clone(), c, None));
        }
    }

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        groups.entry(rec.get(dev_col).unwrap_or("").trim().to_string()).or_default().push(i);
    }
    if groups.is_empty() {
        return Err(Error::EmptyDevice(schema.device_column.clone()));
    }
    let d = plan.len() + 1;
    let mut devices = Vec::with_capacity(groups.len());
    for (id, rows) in &groups {
        let mut x = DMatrix::zeros(d, rows.len());
        let mut y = DVector::zeros(rows.len());
        for (col, &i) in rows.iter().enumerate() {
            let rec = &records[i];
            y[col] = parse(target_col, i, rec)?;
            x[(0, col)] = 1.0;
            for (j, (_, src, level)) in plan.iter().enumerate() {
                x[(j + 1, col)] = match level {
                    Some(l) => f64::from(rec.get(*src).unwrap_or("").trim() == l),
                    None => parse(*src, i, rec)?,
                };
            }
        }
        devices.push(DeviceDataset::new(id.clone(), x, y)?);
    }
    let mut ds = FederatedDataset::new(devices)?;
    if let Some((policy, seed)) = split {
        ds = train_test_split(ds, policy, seed)?;
    }
    if schema.standardize {
        let numeric: Vec<usize> = plan.iter().enumerate().filter(|(_, p)| p.2.is_none()).map(|(j, _)| j + 1).collect();
        let pooled = ds.pooled_train();
        let n = pooled.n() as f64;
        let mut st = Standardizer {
            rows: Vec::new(),
            names: Vec::new(),
            means: Vec::new(),
            sds: Vec::new(),
        };
        for row in numeric {
            let vals = pooled.x().row(row);
            let mean = vals.sum() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            st.rows.push(row);
            st.names.push(plan[row - 1].0.clone());
            st.means.push(mean);
            st.sds.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        for dev in &mut ds.devices {
            st.apply(&mut dev.x);
        }
        ds.standardizer = Some(st);
    }
    Ok(ds)
}

/// Loads a CSV with a time column and builds per-device polynomial designs in time.
pub fn load_csv_polynomial(path: &Path, device_column: &str, time_column: &str, target_column: &str, order: usize) -> Result<FederatedDataset> {
    let schema = CsvSchema {
        device_column: device_column.into(),
        target_column: target_column.into(),
        ..CsvSchema::default()
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let keep = [device_column, time_column, target_column];
    for c in keep {
        if !headers.iter().any(|h| h == c) {
            return Err(Error::MissingColumn(c.to_string()));
        }
    }
    let schema = CsvSchema {
        drop: headers.iter().filter(|h| !keep.contains(&h.as_str())).cloned().collect(),
        ..schema
    };
    let raw = load_csv_federated(path, &schema, None)?;
    let mut devices = Vec::with_capacity(raw.k());
    for dev in raw.devices {
        // row 1 holds the time column after the intercept
        let mut order_idx: Vec<usize> = (0..dev.n()).collect();
        order_idx.sort_by(|&a, &b| dev.x()[(1, a)].total_cmp(&dev.x()[(1, b)]));
        let sorted = dev.subset(&order_idx);
        let t = sorted.x().row(1).transpose();
        devices.push(DeviceDataset::new(sorted.id().to_string(), polynomial_design(&t, order, true), sorted.y().clone())?);
    }
    FederatedDataset::new(devices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    fn spec(case: CaseId) -> SyntheticCaseSpec {
        SyntheticCaseSpec::new(case, 7)
    }

    fn ols(dev: &DeviceDataset) -> DVector<f64> {
        dev.gram().cholesky().unwrap().solve(&dev.xy())
    }

    #[test]
    fn hm1_case_one_shape() {
        let ds = generate(&spec(CaseId::Hm1I)).unwrap();
        assert_eq!(ds.k(), 2);
        assert_eq!(ds.dim(), 5);
        assert_eq!((ds.train(0).n(), ds.train(1).n()), (20, 200));
        assert_eq!(ds.test(0).unwrap().n(), 1000);
        assert_eq!(ds.true_omega.as_ref().unwrap()[(0, 1)], 0.7);
    }

    #[test]
    fn hm1_case_three_sizes() {
        let ds = generate(&spec(CaseId::Hm1III)).unwrap();
        assert_eq!(ds.k(), 100);
        assert!((0..100).all(|k| ds.train(k).n() == 20));
        let two = generate(&spec(CaseId::Hm1II)).unwrap();
        assert_eq!(two.train(29).n(), 40);
        assert_eq!(two.train(30).n(), 275);
    }

    #[test]
    fn noiseless_override_is_exact() {
        let mut s = spec(CaseId::Hm1I);
        s.overrides.noise_sd = Some(0.0);
        let ds = generate(&s).unwrap();
        let theta = ds.true_theta.clone().unwrap();
        for k in 0..2 {
            let dev = &ds.devices[k];
            let resid = dev.y() - dev.predict(&theta.column(k).into_owned());
            assert!(resid.amax() < 1e-12);
        }
    }

    #[test]
    fn hm2_truths() {
        let one = generate(&spec(CaseId::Hm2I)).unwrap();
        let col: Vec<f64> = one.true_theta.as_ref().unwrap().column(0).iter().copied().collect();
        assert_eq!(col, vec![3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        assert_eq!(one.k(), 10);
        let three = generate(&spec(CaseId::Hm2III)).unwrap();
        assert_eq!(three.dim(), 30);
        let t = three.true_theta.as_ref().unwrap();
        assert!((10..20).all(|i| t[(i, 0)] == 0.0));
        assert!((0..10).chain(20..30).all(|i| t[(i, 0)] == 3.0));
        assert_eq!((three.train(0).n(), three.test(0).unwrap().n()), (40, 400));
        let two = generate(&spec(CaseId::Hm2II)).unwrap();
        assert_eq!((two.train(1).n(), two.train(2).n()), (20, 200));
    }

    #[test]
    fn hm2_noiseless_recovers_truth() {
        for case in [CaseId::Hm2I, CaseId::Hm2III] {
            let mut s = spec(case);
            s.overrides.noise_sd = Some(0.0);
            let ds = generate(&s).unwrap();
            let truth = ds.true_theta.as_ref().unwrap().column(0).into_owned();
            for k in 0..ds.k() {
                assert!((ols(&ds.train(k)) - &truth).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn uq_truths_and_clt_band() {
        let ds = generate(&spec(CaseId::Uq100)).unwrap();
        let phi = ds.true_phi.as_ref().unwrap();
        assert_eq!(phi["mu2"], 3.0);
        assert_eq!(phi["var4"], 0.67);
        assert_eq!(ds.k(), 100);
        assert!((0..100).all(|k| ds.train(k).n() == 100));
        let theta = ds.true_theta.as_ref().unwrap();
        for i in 0..4 {
            let mean = theta.row(i).sum() / 100.0;
            assert!((mean - UQ_MEAN[i]).abs() < 3.0 * UQ_VAR[i].sqrt() / 10.0, "component {i}");
        }
    }

    #[test]
    fn residual_sd_matches_noise() {
        let ds = generate(&spec(CaseId::Hm1IV)).unwrap();
        let theta = ds.true_theta.as_ref().unwrap();
        for k in 0..5 {
            let dev = ds.train(k);
            let r = dev.y() - dev.predict(&theta.column(k).into_owned());
            let sd = (r.norm_squared() / (dev.n() - 1) as f64).sqrt();
            assert!((sd - 0.1).abs() < 0.015, "sd {sd}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for case in CaseId::ALL {
            assert_eq!(generate(&spec(case)).unwrap(), generate(&spec(case)).unwrap());
        }
        assert_ne!(
            generate(&spec(CaseId::Hm1I)).unwrap(),
            generate(&SyntheticCaseSpec::new(CaseId::Hm1I, 8)).unwrap()
        );
    }

    #[test]
    fn unknown_case_rejected() {
        assert!(matches!("HM3-I".parse::<CaseId>(), Err(Error::UnknownCase(_))));
        assert_eq!("hm1-ii".parse::<CaseId>().unwrap(), CaseId::Hm1II);
        assert!(gen_hm2_case(&spec(CaseId::Hm1I)).is_err());
    }

    #[test]
    fn polynomial_design_examples() {
        let x = polynomial_design(&DVector::from_vec(vec![0.0]), 3, false);
        assert_eq!(x.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0]);
        let x = polynomial_design(&DVector::from_vec(vec![2.0]), 3, false);
        assert_eq!(x.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 4.0, 8.0]);
        let x = polynomial_design(&DVector::from_vec(vec![3.0, -1.0, 5.0]), 2, true);
        assert!(x.row(0).iter().all(|v| *v == 1.0));
        assert_eq!(x.row(1).iter().copied().collect::<Vec<_>>(), vec![2.0 / 3.0, 0.0, 1.0]);
    }

    #[test]
    fn split_examples() {
        let dev = DeviceDataset::new("a", DMatrix::from_fn(1, 10, |_, i| i as f64), DVector::zeros(10)).unwrap();
        let ds = FederatedDataset::new(vec![dev]).unwrap();
        let t = train_test_split(ds.clone(), SplitPolicy::TimePrefix(0.6), 1).unwrap();
        assert_eq!(t.splits.as_ref().unwrap()[0].train, (0..6).collect::<Vec<_>>());
        let f = train_test_split(ds.clone(), SplitPolicy::FractionPerDevice(0.6), 1).unwrap();
        let s = &f.splits.as_ref().unwrap()[0];
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(s.train.len(), 6);
        assert_eq!(f, train_test_split(ds.clone(), SplitPolicy::FractionPerDevice(0.6), 1).unwrap());
        assert!(train_test_split(ds.clone(), SplitPolicy::TimePrefix(1.0), 1).is_err());
        let tiny = FederatedDataset::new(vec![DeviceDataset::new("b", DMatrix::zeros(1, 1), DVector::zeros(1)).unwrap()]).unwrap();
        assert!(train_test_split(tiny, SplitPolicy::TimePrefix(0.5), 1).is_err());
    }

    fn write_csv(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_single_device_raw() {
        let f = write_csv("g,a,b,y\ns,1.5,2,10\ns,3,4,20\n");
        let schema = CsvSchema {
            device_column: "g".into(),
            target_column: "y".into(),
            ..CsvSchema::default()
        };
        let ds = load_csv_federated(f.path(), &schema, None).unwrap();
        assert_eq!(ds.k(), 1);
        assert_eq!(ds.devices[0].x(), &DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.5, 3.0, 2.0, 4.0]));
        assert_eq!(ds.devices[0].y().as_slice(), &[10.0, 20.0]);
    }

    #[test]
    fn csv_dummies_groups_and_standardize_round_trip() {
        let f = write_csv("school,sex,age,g\nA,F,15,10\nA,M,16,12\nB,M,17,9\nB,F,19,14\nB,F,18,11\n");
        let schema = CsvSchema {
            device_column: "school".into(),
            target_column: "g".into(),
            dummy_encode: vec!["sex".into()],
            standardize: true,
            drop: vec![],
        };
        let ds = load_csv_federated(f.path(), &schema, None).unwrap();
        assert_eq!(ds.k(), 2);
        assert_eq!(ds.dim(), 3);
        let st = ds.standardizer.as_ref().unwrap();
        assert_eq!(st.names, vec!["age".to_string()]);
        let raw = st.unstandardize(ds.devices[1].x());
        for (v, want) in raw.row(2).iter().zip([17.0, 19.0, 18.0]) {
            assert_relative_eq!(*v, want, epsilon = 1e-10);
        }
        // sex_M dummy
        assert_eq!(ds.devices[0].x().row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
    }

    #[test]
    fn csv_errors_are_distinct() {
        let schema = |t: &str| CsvSchema {
            device_column: "g".into(),
            target_column: t.into(),
            ..CsvSchema::default()
        };
        let f = write_csv("g,a,y\ns,1,oops\n");
        assert!(matches!(load_csv_federated(f.path(), &schema("z"), None), Err(Error::MissingColumn(c)) if c == "z"));
        assert!(matches!(
            load_csv_federated(f.path(), &schema("y"), None),
            Err(Error::NonNumeric { column, .. }) if column == "y"
        ));
        let empty = write_csv("g,a,y\n");
        assert!(matches!(load_csv_federated(empty.path(), &schema("y"), None), Err(Error::EmptyDevice(_))));
    }

    #[test]
    fn csv_polynomial_groups_by_time() {
        let f = write_csv("unit,cycle,s2,other\n1,2,5,0\n1,1,4,0\n1,3,6,0\n2,1,7,0\n2,2,8,0\n");
        let ds = load_csv_polynomial(f.path(), "unit", "cycle", "s2", 3).unwrap();
        assert_eq!(ds.k(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.devices[0].y().as_slice(), &[4.0, 5.0, 6.0]);
        assert_eq!(ds.devices[0].x().row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn poly_surrogate_is_time_split() {
        let ds = generate(&spec(CaseId::PolySurrogate)).unwrap();
        assert_eq!((ds.k(), ds.dim()), (100, 4));
        let s = &ds.splits.as_ref().unwrap()[0];
        assert_eq!(s.train, (0..18).collect::<Vec<_>>());
    }

    #[test]
    fn export_is_byte_identical() {
        let ds = generate(&spec(CaseId::Hm1I)).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        ds.export(a.path()).unwrap();
        ds.export(b.path()).unwrap();
        for name in ["dev001.csv", "dev002.csv", "manifest.json"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let rows = fs::read_to_string(a.path().join("dev001.csv")).unwrap().lines().count();
        assert_eq!(rows, 1 + 20 + 1000);
    }
}
