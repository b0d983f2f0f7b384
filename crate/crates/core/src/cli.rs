//! Config-driven experiment harness behind the `fedhier` binary.
//!
//! A config is one TOML file. Relative paths inside it resolve against the
//! file's directory. Repeat `r` runs with seed `master_seed + r`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{Coefficients, Ditto, FedAvg, Separate, SgdConfig};
use crate::datasets::{
    format_f64, generate, load_csv_federated, load_csv_polynomial, train_test_split, CaseId, CaseOverrides, CsvSchema,
    FederatedDataset, SplitPolicy, SyntheticCaseSpec,
};
use crate::error::{Error, Result};
use crate::hm1::{BatchSize, Hm1, Hm1Config};
use crate::hm2::select::coefficient_intervals;
use crate::hm2::{federated_posteriors, Ep, EpConfig, EpDevice, EpServer, HierModelSpec, McmcConfig, ModelKind, NoiseModel};
use crate::metrics::{evaluate, inclusion_rates, mean_sd, param_error};
use crate::rng;
use crate::runtime::{run_rounds, RoundConfig, RunManifest};

/// Training fraction of the validation split used for grid tuning.
pub const TUNING_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub algorithm: Option<AlgorithmConfig>,
    pub rounds: Option<RoundConfig>,
    #[serde(default)]
    pub select: SelectConfig,
    #[serde(default)]
    pub bench: Vec<BenchEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        case: CaseId,
        #[serde(default)]
        overrides: CaseOverrides,
    },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
        split: Option<SplitPolicy>,
    },
    /// Per-device polynomial trend in a time column.
    Polynomial {
        path: PathBuf,
        device_column: String,
        time_column: String,
        target_column: String,
        order: usize,
        split: Option<SplitPolicy>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub intercept: bool,
    pub noise: Option<NoiseModel>,
    pub marginal_draws: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DittoConfig {
    pub eta: f64,
    pub batch: BatchSize,
    pub lambda: f64,
    pub personal_steps: usize,
}

impl Default for DittoConfig {
    fn default() -> Self {
        let d = Ditto::default();
        Self {
            eta: d.sgd.eta,
            batch: d.sgd.batch,
            lambda: d.lambda,
            personal_steps: d.personal_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", deny_unknown_fields)]
pub enum AlgorithmConfig {
    #[serde(rename = "hm1")]
    Hm1(Hm1Config),
    #[serde(rename = "hm2-ep")]
    Hm2Ep {
        model: ModelConfig,
        #[serde(default)]
        ep: EpConfig,
    },
    #[serde(rename = "fedavg")]
    FedAvg(SgdConfig),
    #[serde(rename = "separate")]
    Separate(SgdConfig),
    #[serde(rename = "ditto")]
    Ditto(DittoConfig),
}

impl AlgorithmConfig {
    pub fn id(&self) -> &'static str {
        match self {
            AlgorithmConfig::Hm1(_) => "hm1",
            AlgorithmConfig::Hm2Ep { .. } => "hm2-ep",
            AlgorithmConfig::FedAvg(_) => "fedavg",
            AlgorithmConfig::Separate(_) => "separate",
            AlgorithmConfig::Ditto(_) => "ditto",
        }
    }

    /// Rounds used when the config gives none.
    pub fn default_rounds(&self) -> RoundConfig {
        match self {
            AlgorithmConfig::Hm2Ep { .. } => RoundConfig::new(20, 1, 0),
            AlgorithmConfig::Separate(_) => RoundConfig::new(1, 600, 0),
            _ => RoundConfig::new(20, 30, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AlgorithmConfig::Hm1(c) => c.validate(),
            AlgorithmConfig::Hm2Ep { model, ep } => {
                ep.validate()?;
                if model.marginal_draws == Some(0) {
                    return Err(Error::InvalidArgument("marginal_draws must be positive".into()));
                }
                match (model.kind, model.noise) {
                    (ModelKind::MeanFieldNormal | ModelKind::UqModel, Some(NoiseModel::Hyper)) => {
                        Err(Error::InvalidArgument("mean-field models take a known or residual noise variance".into()))
                    }
                    (ModelKind::LassoLaplace | ModelKind::RidgeNormal, Some(n)) if n != NoiseModel::Hyper => {
                        Err(Error::InvalidArgument("penalized models estimate the noise as a hyper-parameter".into()))
                    }
                    (_, Some(NoiseModel::Known(v))) if !(v > 0.0) => Err(Error::InvalidArgument("known noise variance must be positive".into())),
                    _ => Ok(()),
                }
            }
            AlgorithmConfig::FedAvg(s) | AlgorithmConfig::Separate(s) => s.validate(),
            AlgorithmConfig::Ditto(c) => Ditto::new(SgdConfig { eta: c.eta, batch: c.batch }, c.lambda, c.personal_steps).map(|_| ()),
        }
    }
}

/// Model of an EP run on `d` features.
pub fn build_spec(model: &ModelConfig, d: usize) -> Result<HierModelSpec> {
    let mut spec = match model.kind {
        ModelKind::MeanFieldNormal => HierModelSpec::mean_field(d, model.noise.unwrap_or(NoiseModel::Residual))?,
        ModelKind::UqModel => {
            if d != 4 {
                return Err(Error::DimensionMismatch {
                    context: "uq model features",
                    expected: 4,
                    found: d,
                });
            }
            let mut s = HierModelSpec::uq();
            if let Some(n) = model.noise {
                s.noise = n;
            }
            s
        }
        ModelKind::LassoLaplace => HierModelSpec::lasso(d, model.intercept)?,
        ModelKind::RidgeNormal => HierModelSpec::ridge(d, model.intercept)?,
    };
    if model.intercept && !matches!(model.kind, ModelKind::LassoLaplace | ModelKind::RidgeNormal) {
        return Err(Error::InvalidArgument("only penalized models take an intercept".into()));
    }
    if let Some(m) = model.marginal_draws {
        spec.marginal_draws = m;
    }
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    pub level: f64,
    pub mcmc: McmcConfig,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            level: 0.9,
            mcmc: McmcConfig::default(),
        }
    }
}

/// One algorithm of a benchmark, optionally tuned over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchEntry {
    pub label: Option<String>,
    pub algorithm: AlgorithmConfig,
    pub rounds: Option<RoundConfig>,
    /// Candidate values per field; dotted keys reach nested tables.
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<f64>>,
}

impl BenchEntry {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.algorithm.id().to_string())
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Range checks on everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if let Some(a) = &self.algorithm {
            a.validate().map_err(config_error)?;
        }
        for r in self.rounds.iter().chain(self.bench.iter().filter_map(|b| b.rounds.as_ref())) {
            if r.rounds == 0 || r.local_steps == 0 {
                return bad("rounds and local_steps must be positive".into());
            }
        }
        if !(self.select.level > 0.0 && self.select.level < 1.0) {
            return bad(format!("select level {} outside (0, 1)", self.select.level));
        }
        self.select.mcmc.validate().map_err(config_error)?;
        if let DataConfig::Polynomial { order, .. } = &self.data {
            if *order == 0 {
                return bad("polynomial order must be positive".into());
            }
        }
        let mut labels = Vec::new();
        for b in &self.bench {
            b.algorithm.validate().map_err(config_error)?;
            for (key, values) in &b.grid {
                if values.is_empty() {
                    return bad(format!("grid `{key}` has no values"));
                }
                patch(&b.algorithm, &[(key.as_str(), values[0])])?.validate().map_err(config_error)?;
            }
            if labels.contains(&b.label()) {
                return bad(format!("duplicate bench label `{}`; set `label`", b.label()));
            }
            labels.push(b.label());
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn seed(&self, repeat: usize) -> u64 {
        self.master_seed.wrapping_add(repeat as u64)
    }

    /// Dataset of one repeat.
    pub fn load_data(&self, seed: u64) -> Result<FederatedDataset> {
        match &self.data {
            DataConfig::Synthetic { case, overrides } => generate(&SyntheticCaseSpec {
                case: *case,
                seed,
                overrides: overrides.clone(),
            }),
            DataConfig::Csv { path, schema, split } => load_csv_federated(&self.resolve(path), schema, split.map(|s| (s, seed))),
            DataConfig::Polynomial {
                path,
                device_column,
                time_column,
                target_column,
                order,
                split,
            } => {
                let ds = load_csv_polynomial(&self.resolve(path), device_column, time_column, target_column, *order)?;
                match split {
                    Some(s) => train_test_split(ds, *s, seed),
                    None => Ok(ds),
                }
            }
        }
    }

    fn algorithm(&self) -> Result<&AlgorithmConfig> {
        self.algorithm.as_ref().ok_or_else(|| Error::Config("this command needs an [algorithm] table".into()))
    }

    fn rounds_for(&self, alg: &AlgorithmConfig, own: Option<&RoundConfig>, seed: u64) -> RoundConfig {
        let mut r = own.or(self.rounds.as_ref()).cloned().unwrap_or_else(|| alg.default_rounds());
        r.seed = seed;
        r
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

/// Copy of `alg` with the given fields replaced.
pub fn patch(alg: &AlgorithmConfig, values: &[(&str, f64)]) -> Result<AlgorithmConfig> {
    let mut v = serde_json::to_value(alg)?;
    for (key, value) in values {
        let mut at = &mut v;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            at = at
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("grid key `{key}` does not name a table of `{}`", alg.id())))?;
        }
        let obj = at
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("grid key `{key}` does not name a field")))?;
        let number = match obj.get(*parts.last().expect("split yields one part")) {
            Some(serde_json::Value::Number(n)) if n.is_u64() || n.is_i64() => {
                if value.fract() != 0.0 || *value < 0.0 {
                    return Err(Error::Config(format!("grid key `{key}` takes integers")));
                }
                serde_json::Value::from(*value as u64)
            }
            _ => serde_json::Value::from(*value),
        };
        obj.insert(parts.last().expect("non-empty").to_string(), number);
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("grid patch of `{}`: {e}", alg.id())))
}

/// Every combination of a grid, in key order.
pub fn grid_points(grid: &BTreeMap<String, Vec<f64>>) -> Vec<Vec<(&str, f64)>> {
    let mut out = vec![vec![]];
    for (key, values) in grid {
        out = out
            .into_iter()
            .flat_map(|p: Vec<(&str, f64)>| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.as_str(), *v));
                    q
                })
            })
            .collect();
    }
    out
}

/// Devices over which A-RMSE is reported.
pub fn eval_set(data: &FederatedDataset) -> Vec<usize> {
    match data.case.as_deref().map(str::parse::<CaseId>) {
        Some(Ok(c)) => c.eval_devices(data.k()),
        _ => (0..data.k()).collect(),
    }
}

/// Result of one training run.
pub struct FitOutcome {
    pub manifest: RunManifest,
    /// Column `k` holds device `k`'s coefficients.
    pub theta: DMatrix<f64>,
    pub ep: Option<EpOutcome>,
}

pub struct EpOutcome {
    pub spec: HierModelSpec,
    pub server: EpServer,
    pub devices: Vec<EpDevice>,
}

fn fit_with<A: Coefficients>(alg: &A, data: &FederatedDataset, rounds: &RoundConfig) -> Result<(crate::runtime::RunOutput<A>, DMatrix<f64>)> {
    let out = run_rounds(alg, data, rounds)?;
    let theta = alg.coefficients(&out.server, &out.devices, data)?;
    Ok((out, theta))
}

/// Trains `cfg` and attaches held-out metrics to the manifest.
pub fn run_algorithm(cfg: &AlgorithmConfig, data: &FederatedDataset, rounds: &RoundConfig) -> Result<FitOutcome> {
    let (manifest, theta, ep) = match cfg {
        AlgorithmConfig::Hm1(c) => {
            let (o, t) = fit_with(&Hm1::new(c.clone())?, data, rounds)?;
            (o.manifest, t, None)
        }
        AlgorithmConfig::Hm2Ep { model, ep } => {
            let spec = build_spec(model, data.dim())?;
            let alg = Ep::new(spec.clone(), ep.clone())?;
            let (o, t) = fit_with(&alg, data, rounds)?;
            (
                o.manifest,
                t,
                Some(EpOutcome {
                    spec,
                    server: o.server,
                    devices: o.devices,
                }),
            )
        }
        AlgorithmConfig::FedAvg(s) => {
            let (o, t) = fit_with(&FedAvg::new(s.clone())?, data, rounds)?;
            (o.manifest, t, None)
        }
        AlgorithmConfig::Separate(s) => {
            let (o, t) = fit_with(&Separate::new(s.clone())?, data, rounds)?;
            (o.manifest, t, None)
        }
        AlgorithmConfig::Ditto(c) => {
            let alg = Ditto::new(SgdConfig { eta: c.eta, batch: c.batch }, c.lambda, c.personal_steps)?;
            let (o, t) = fit_with(&alg, data, rounds)?;
            (o.manifest, t, None)
        }
    };
    let mut manifest = manifest;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} coefficients", cfg.id())));
    }
    if data.splits.is_some() {
        manifest.metrics.extend(evaluate(&theta, data, &eval_set(data))?.scalars());
    } else {
        manifest.warnings.push("no held-out split; prediction metrics omitted".into());
        if let Some(t) = &data.true_theta {
            manifest.metrics.insert("param_error".into(), param_error(&theta, t));
        }
    }
    Ok(FitOutcome { manifest, theta, ep })
}

fn run_dir(out: &Path, repeat: usize) -> PathBuf {
    out.join(format!("run-{repeat:03}"))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

/// Writes each repeat's dataset; a single repeat goes straight to the output directory.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.output();
    (0..cfg.repeats).into_par_iter().try_for_each(|r| {
        let data = cfg.load_data(cfg.seed(r))?;
        data.export(&if cfg.repeats == 1 { out.clone() } else { run_dir(&out, r) })
    })
}

/// Trains every repeat and writes manifests, monitors, coefficients and `metrics.csv`.
pub fn cmd_fit(cfg: &ExperimentConfig) -> Result<Vec<RunManifest>> {
    let alg = cfg.algorithm()?;
    let out = cfg.output();
    let manifests: Vec<RunManifest> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed(r);
            let data = cfg.load_data(seed)?;
            let fit = run_algorithm(alg, &data, &cfg.rounds_for(alg, None, seed))?;
            let dir = run_dir(&out, r);
            create_dir(&dir)?;
            fit.manifest.write_json(&dir.join("manifest.json"))?;
            fit.manifest.write_monitors_csv(&dir.join("monitors.csv"))?;
            write_coefficients(&dir.join("coefficients.csv"), &fit.theta, &data)?;
            if let Some(ep) = &fit.ep {
                write_phi(&dir.join("phi.csv"), ep)?;
            }
            Ok(fit.manifest)
        })
        .collect::<Result<_>>()?;
    create_dir(&out)?;
    let keys: Vec<String> = manifests
        .iter()
        .flat_map(|m| m.metrics.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut header = vec!["repeat", "seed", "algorithm"];
    header.extend(keys.iter().map(String::as_str));
    write_csv(
        &out.join("metrics.csv"),
        &header,
        manifests.iter().enumerate().map(|(r, m)| {
            let mut row = vec![r.to_string(), m.seed.to_string(), m.algorithm.clone()];
            row.extend(keys.iter().map(|k| opt(m.metrics.get(k).copied())));
            row
        }),
    )?;
    Ok(manifests)
}

fn write_coefficients(path: &Path, theta: &DMatrix<f64>, data: &FederatedDataset) -> Result<()> {
    let rows = (0..theta.ncols()).flat_map(|k| {
        (0..theta.nrows()).map(move |j| vec![data.devices[k].id().to_string(), (j + 1).to_string(), format_f64(theta[(j, k)])])
    });
    write_csv(path, &["device", "coefficient", "value"], rows)
}

/// Mean, sd and 90% bounds of each coordinate of `q`.
fn write_phi(path: &Path, ep: &EpOutcome) -> Result<()> {
    let q = ep.server.posterior()?;
    let z = 1.6448536269514722;
    let rows = ep.spec.layout.labels().into_iter().enumerate().map(|(i, label)| {
        let (m, s) = (q.mean()[i], q.covariance()[(i, i)].sqrt());
        vec![label, format_f64(m), format_f64(s), format_f64(m - z * s), format_f64(m + z * s)]
    });
    write_csv(path, &["parameter", "mean", "sd", "lower90", "upper90"], rows)
}

/// Per-repeat selection summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionSummary {
    pub seed: u64,
    pub correct_inclusion: Option<f64>,
    pub false_inclusion: Option<f64>,
    /// Included predictors per device, intercept excluded.
    pub predictor_counts: Vec<usize>,
}

/// EP, per-device posterior draws and interval selection for every repeat.
pub fn cmd_select(cfg: &ExperimentConfig) -> Result<Vec<SelectionSummary>> {
    let alg = cfg.algorithm()?;
    if !matches!(alg, AlgorithmConfig::Hm2Ep { .. }) {
        return Err(Error::Config("select needs `id = \"hm2-ep\"`".into()));
    }
    let out = cfg.output();
    let summaries: Vec<SelectionSummary> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed(r);
            let data = cfg.load_data(seed)?;
            let mut fit = run_algorithm(alg, &data, &cfg.rounds_for(alg, None, seed))?;
            let ep = fit.ep.as_ref().expect("EP run");
            let draws = federated_posteriors(&ep.spec, &ep.server, &ep.devices, &cfg.select.mcmc, seed)?;
            let skip = usize::from(ep.spec.intercept);
            let mut rows = Vec::new();
            let mut masks = Vec::with_capacity(data.k());
            let mut counts = Vec::with_capacity(data.k());
            let mut rates = Vec::new();
            for (k, dr) in draws.iter().enumerate() {
                if !(mcmc_band(dr.acceptance)) {
                    fit.manifest
                        .warnings
                        .push(format!("device {}: acceptance {:.3} outside the target band", data.devices[k].id(), dr.acceptance));
                }
                let ci = coefficient_intervals(&dr.theta, cfg.select.level)?;
                let mask: Vec<bool> = ci.iter().map(|&c| crate::hm2::select::excludes_zero(c)).collect();
                for (j, (lo, hi)) in ci.iter().enumerate() {
                    let mean = dr.theta.row(j).mean();
                    rows.push(vec![
                        data.devices[k].id().to_string(),
                        (j + 1).to_string(),
                        format_f64(mean),
                        format_f64(*lo),
                        format_f64(*hi),
                        u8::from(mask[j]).to_string(),
                    ]);
                }
                let penalized = mask[skip..].to_vec();
                counts.push(penalized.iter().filter(|m| **m).count());
                if let Some(t) = &data.true_theta {
                    let support: Vec<bool> = t.column(k).iter().skip(skip).map(|v| *v != 0.0).collect();
                    rates.push(inclusion_rates(std::slice::from_ref(&penalized), &support)?);
                }
                masks.push(penalized);
            }
            let (correct, false_rate) = if rates.is_empty() {
                (None, None)
            } else {
                let n = rates.len() as f64;
                (
                    Some(rates.iter().map(|r| r.correct_rate).sum::<f64>() / n),
                    Some(rates.iter().map(|r| r.false_rate).sum::<f64>() / n),
                )
            };
            if let (Some(c), Some(f)) = (correct, false_rate) {
                fit.manifest.metrics.insert("correct_inclusion".into(), c);
                fit.manifest.metrics.insert("false_inclusion".into(), f);
            }
            let dir = run_dir(&out, r);
            create_dir(&dir)?;
            fit.manifest.write_json(&dir.join("manifest.json"))?;
            fit.manifest.write_monitors_csv(&dir.join("monitors.csv"))?;
            write_phi(&dir.join("phi.csv"), ep)?;
            write_csv(&dir.join("intervals.csv"), &["device", "coefficient", "mean", "lower", "upper", "included"], rows)?;
            Ok(SelectionSummary {
                seed,
                correct_inclusion: correct,
                false_inclusion: false_rate,
                predictor_counts: counts,
            })
        })
        .collect::<Result<_>>()?;
    create_dir(&out)?;
    write_csv(
        &out.join("rates.csv"),
        &["repeat", "seed", "correct_inclusion", "false_inclusion", "mean_predictors"],
        summaries.iter().enumerate().map(|(r, s)| {
            let mean = s.predictor_counts.iter().sum::<usize>() as f64 / s.predictor_counts.len() as f64;
            vec![r.to_string(), s.seed.to_string(), opt(s.correct_inclusion), opt(s.false_inclusion), format_f64(mean)]
        }),
    )?;
    let ids: Vec<String> = cfg.load_data(cfg.seed(0))?.devices.iter().map(|d| d.id().to_string()).collect();
    write_csv(
        &out.join("predictor_counts.csv"),
        &["repeat", "device", "included"],
        summaries.iter().enumerate().flat_map(|(r, s)| {
            let ids = &ids;
            s.predictor_counts
                .iter()
                .enumerate()
                .map(move |(k, c)| vec![r.to_string(), ids.get(k).cloned().unwrap_or_default(), c.to_string()])
        }),
    )?;
    Ok(summaries)
}

fn mcmc_band(a: f64) -> bool {
    let (lo, hi) = crate::hm2::mcmc::ACCEPTANCE_BAND;
    (lo..=hi).contains(&a)
}

/// A-RMSE of every bench entry and repeat.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub label: String,
    pub algorithm: AlgorithmConfig,
    pub a_rmse: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

/// Validation A-RMSE of `alg` on a split of the training rows.
fn validation_score(alg: &AlgorithmConfig, data: &FederatedDataset, rounds: &RoundConfig) -> Result<f64> {
    let mut train = FederatedDataset::new(data.train_devices())?;
    train.case = data.case.clone();
    let val = train_test_split(
        train,
        SplitPolicy::FractionPerDevice(TUNING_TRAIN_FRACTION),
        rng::derive_seed(rounds.seed, "validation"),
    )?;
    let fit = run_algorithm(alg, &val, rounds)?;
    fit.manifest
        .metrics
        .get("a_rmse")
        .copied()
        .ok_or_else(|| Error::NonFinite("validation score".into()))
}

/// Picks the grid point with the lowest validation A-RMSE on the first repeat's data.
pub fn tune(entry: &BenchEntry, cfg: &ExperimentConfig) -> Result<AlgorithmConfig> {
    if entry.grid.is_empty() {
        return Ok(entry.algorithm.clone());
    }
    let seed = cfg.seed(0);
    let data = cfg.load_data(seed)?;
    let rounds = cfg.rounds_for(&entry.algorithm, entry.rounds.as_ref(), seed);
    let candidates = grid_points(&entry.grid)
        .into_iter()
        .map(|p| patch(&entry.algorithm, &p))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|c| validation_score(c, &data, &rounds).or_else(|e| if e.is_numerical() { Ok(f64::INFINITY) } else { Err(e) }))
        .collect::<Result<_>>()?;
    let best = (0..scores.len())
        .min_by(|&a, &b| scores[a].total_cmp(&scores[b]))
        .filter(|&i| scores[i].is_finite())
        .ok_or_else(|| Error::NonFinite(format!("every grid point of `{}` diverged", entry.label())))?;
    Ok(candidates[best].clone())
}

fn default_bench() -> Vec<BenchEntry> {
    let entry = |a: AlgorithmConfig| BenchEntry {
        label: None,
        algorithm: a,
        rounds: None,
        grid: BTreeMap::new(),
    };
    vec![
        entry(AlgorithmConfig::Hm1(Hm1Config::default())),
        entry(AlgorithmConfig::Ditto(DittoConfig::default())),
        entry(AlgorithmConfig::Separate(SgdConfig::default())),
        entry(AlgorithmConfig::FedAvg(SgdConfig::default())),
    ]
}

/// Runs every entry on the same seed schedule and writes `bench.csv` and `bench.json`.
pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<Vec<BenchResult>> {
    let entries = if cfg.bench.is_empty() { default_bench() } else { cfg.bench.clone() };
    let tuned = entries.iter().map(|e| tune(e, cfg)).collect::<Result<Vec<_>>>()?;
    let scores: Vec<Vec<f64>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed(r);
            let data = cfg.load_data(seed)?;
            if data.splits.is_none() {
                return Err(Error::Config("bench needs data with a held-out split".into()));
            }
            entries
                .iter()
                .zip(&tuned)
                .map(|(e, alg)| {
                    let fit = run_algorithm(alg, &data, &cfg.rounds_for(alg, e.rounds.as_ref(), seed))?;
                    Ok(fit.manifest.metrics["a_rmse"])
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let results: Vec<BenchResult> = entries
        .iter()
        .zip(tuned)
        .enumerate()
        .map(|(i, (e, alg))| {
            let a: Vec<f64> = scores.iter().map(|s| s[i]).collect();
            let (mean, sd) = mean_sd(&a);
            BenchResult {
                label: e.label(),
                algorithm: alg,
                a_rmse: a,
                mean,
                sd,
            }
        })
        .collect();
    let out = cfg.output();
    create_dir(&out)?;
    let mut rows = Vec::new();
    for b in &results {
        for (r, v) in b.a_rmse.iter().enumerate() {
            rows.push(vec![b.label.clone(), r.to_string(), cfg.seed(r).to_string(), format_f64(*v), String::new()]);
        }
        rows.push(vec![b.label.clone(), "summary".into(), String::new(), format_f64(b.mean), format_f64(b.sd)]);
    }
    write_csv(&out.join("bench.csv"), &["algorithm", "repeat", "seed", "a_rmse", "sd"], rows)?;
    let path = out.join("bench.json");
    fs::write(&path, serde_json::to_string_pretty(&results)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

#[derive(Debug, Parser)]
#[command(name = "fedhier", version, about = "Federated hierarchical regression experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write per-device CSVs and a truth manifest.
    Gen(RunArgs),
    /// Train one algorithm and report held-out metrics.
    Fit(RunArgs),
    /// Hierarchical EP plus interval-based variable selection.
    Select(RunArgs),
    /// Compare algorithms on one seed schedule.
    Bench(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides `master_seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

impl RunArgs {
    pub fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(o) = &self.out {
            cfg.output_dir = std::path::absolute(o).map_err(|e| Error::io(o, e))?;
        }
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(r) = self.repeats {
            cfg.repeats = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(&a.config()?),
        Command::Fit(a) => {
            for (r, m) in cmd_fit(&a.config()?)?.iter().enumerate() {
                let metrics: Vec<String> = m.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
                println!("repeat {r} seed {}: {}", m.seed, metrics.join(" "));
            }
            Ok(())
        }
        Command::Select(a) => {
            for (r, s) in cmd_select(&a.config()?)?.iter().enumerate() {
                let rates = match (s.correct_inclusion, s.false_inclusion) {
                    (Some(c), Some(f)) => format!("correct {c:.3} false {f:.3} "),
                    _ => String::new(),
                };
                println!("repeat {r} seed {}: {rates}predictors {:?}", s.seed, s.predictor_counts);
            }
            Ok(())
        }
        Command::Bench(a) => {
            for b in cmd_bench(&a.config()?)? {
                println!("{:<12} {:.4} ± {:.4}", b.label, b.mean, b.sd);
            }
            Ok(())
        }
    }
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HM1: &str = r#"
master_seed = 3
[data]
source = "synthetic"
case = "HM1-I"
[algorithm]
id = "hm1"
eta_sgd = 0.01
alpha = 0.1
[rounds]
rounds = 2
local_steps = 5
"#;

    #[test]
    fn parses_tagged_sections() {
        let c = ExperimentConfig::from_toml(HM1).unwrap();
        assert_eq!(c.master_seed, 3);
        assert_eq!(c.repeats, 1);
        match c.algorithm.unwrap() {
            AlgorithmConfig::Hm1(h) => assert_eq!(h.alpha, 0.1),
            other => panic!("{other:?}"),
        }
        assert!(matches!(c.data, DataConfig::Synthetic { case: CaseId::Hm1I, .. }));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for (from, to) in [("alpha = 0.1", "alpah = 0.1"), ("case = \"HM1-I\"", "case = \"HM1-I\"\ncolour = 1"), ("master_seed", "seed")] {
            let e = ExperimentConfig::from_toml(&HM1.replace(from, to)).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{e}");
            assert_eq!(e.exit_code(), 2);
        }
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for (from, to) in [("alpha = 0.1", "alpha = 1.5"), ("eta_sgd = 0.01", "eta_sgd = -1.0"), ("rounds = 2", "rounds = 0"), ("case = \"HM1-I\"", "case = \"HM9\"")] {
            let e = ExperimentConfig::from_toml(&HM1.replace(from, to)).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{from} -> {to}: {e}");
        }
    }

    #[test]
    fn every_algorithm_round_trips() {
        let algs = [
            AlgorithmConfig::Hm1(Hm1Config::default()),
            AlgorithmConfig::Hm2Ep {
                model: ModelConfig {
                    kind: ModelKind::LassoLaplace,
                    intercept: true,
                    noise: None,
                    marginal_draws: Some(128),
                },
                ep: EpConfig::default(),
            },
            AlgorithmConfig::FedAvg(SgdConfig::default()),
            AlgorithmConfig::Separate(SgdConfig { eta: 0.02, batch: BatchSize::Full }),
            AlgorithmConfig::Ditto(DittoConfig::default()),
        ];
        for a in algs {
            let text = toml::to_string(&a).unwrap();
            let back: AlgorithmConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, a, "{text}");
            a.validate().unwrap();
        }
    }

    #[test]
    fn grid_patches_fields() {
        let a = AlgorithmConfig::Hm2Ep {
            model: ModelConfig {
                kind: ModelKind::RidgeNormal,
                intercept: false,
                noise: None,
                marginal_draws: None,
            },
            ep: EpConfig::default(),
        };
        match patch(&a, &[("ep.damping", 0.3), ("ep.draws", 512.0)]).unwrap() {
            AlgorithmConfig::Hm2Ep { ep, .. } => assert_eq!((ep.damping, ep.draws), (0.3, 512)),
            _ => unreachable!(),
        }
        assert!(patch(&a, &[("ep.dampening", 0.3)]).is_err());
        assert!(patch(&a, &[("ep.draws", 1.5)]).is_err());
        let d = AlgorithmConfig::Ditto(DittoConfig::default());
        let grid = BTreeMap::from([("lambda".to_string(), vec![0.1, 1.0]), ("eta".to_string(), vec![0.01, 0.02, 0.05])]);
        let pts = grid_points(&grid);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], vec![("eta", 0.01), ("lambda", 0.1)]);
        assert!(pts.iter().all(|p| patch(&d, p).is_ok()));
    }

    #[test]
    fn model_construction() {
        let m = |kind, noise| ModelConfig {
            kind,
            intercept: false,
            noise,
            marginal_draws: None,
        };
        assert_eq!(build_spec(&m(ModelKind::UqModel, None), 4).unwrap().noise, NoiseModel::Known(0.01));
        assert!(build_spec(&m(ModelKind::UqModel, None), 3).is_err());
        assert_eq!(build_spec(&m(ModelKind::MeanFieldNormal, None), 3).unwrap().noise, NoiseModel::Residual);
        let bad = AlgorithmConfig::Hm2Ep {
            model: m(ModelKind::LassoLaplace, Some(NoiseModel::Residual)),
            ep: EpConfig::default(),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fit_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::from_toml(HM1).unwrap();
        c.output_dir = dir.path().to_path_buf();
        let m = cmd_fit(&c).unwrap();
        assert!(m[0].metrics.contains_key("a_rmse"));
        for f in ["run-000/manifest.json", "run-000/monitors.csv", "run-000/coefficients.csv", "metrics.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("repeat,seed,algorithm,a_rmse"), "{metrics}");
    }

    #[test]
    fn fit_requires_algorithm() {
        let text = HM1.split("[algorithm]").next().unwrap();
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert!(matches!(cmd_fit(&c).unwrap_err(), Error::Config(_)));
    }
}
