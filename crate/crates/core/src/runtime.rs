//! Round-driven federation simulator.
//!
//! One server and `K` devices exchange typed messages. Each round the server
//! broadcasts, sampled participants update locally (in parallel, each with its
//! own random stream) and the server aggregates. Everything observable ends up
//! in a [`RunManifest`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{DeviceDataset, FederatedDataset};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Logical size of one axis of a message field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Axis {
    /// Feature dimension `d`.
    Features,
    /// Number of devices `K`.
    Devices,
    /// Hyper-parameter dimension.
    Hyper,
    /// Per-device sample count. No built-in message may use it.
    Observations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FieldShape {
    Scalar,
    Vector(Axis),
    Matrix(Axis, Axis),
}

impl FieldShape {
    pub fn axes(self) -> Vec<Axis> {
        match self {
            FieldShape::Scalar => vec![],
            FieldShape::Vector(a) => vec![a],
            FieldShape::Matrix(a, b) => vec![a, b],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldSpec {
    pub name: &'static str,
    pub shape: FieldShape,
}

/// Static description of a message type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MessageSchema {
    pub message: &'static str,
    pub fields: Vec<FieldSpec>,
}

impl MessageSchema {
    /// True when no field can hold observation-indexed data.
    pub fn is_parameter_only(&self) -> bool {
        self.fields.iter().all(|f| !f.shape.axes().contains(&Axis::Observations))
    }

    /// Number of values a message carries for the given axis sizes.
    pub fn value_count(&self, features: usize, devices: usize, hyper: usize, observations: usize) -> usize {
        let size = |a: &Axis| match a {
            Axis::Features => features,
            Axis::Devices => devices,
            Axis::Hyper => hyper,
            Axis::Observations => observations,
        };
        self.fields.iter().map(|f| f.shape.axes().iter().map(size).product::<usize>()).sum()
    }
}

/// Broadcast and upload schemas of every built-in algorithm.
pub fn builtin_schemas() -> Vec<(&'static str, MessageSchema)> {
    use crate::baselines::{Ditto, FedAvg, Separate};
    use crate::hm1::Hm1;
    use crate::hm2::Ep;
    fn pair<A: FedAlgorithm>(id: &'static str) -> [(&'static str, MessageSchema); 2] {
        [(id, A::Broadcast::schema()), (id, A::Upload::schema())]
    }
    [pair::<Hm1>("hm1"), pair::<Ep>("hm2-ep"), pair::<FedAvg>("fedavg"), pair::<Ditto>("ditto"), pair::<Separate>("separate")]
        .into_iter()
        .flatten()
        .collect()
}

/// Fails if any built-in message could carry observation-level data.
pub fn privacy_audit() -> Result<()> {
    match builtin_schemas().into_iter().find(|(_, s)| !s.is_parameter_only()) {
        Some((id, s)) => Err(Error::InvalidArgument(format!("{id}: message `{}` has an observation-indexed field", s.message))),
        None => Ok(()),
    }
}

/// Anything that crosses the simulated network.
pub trait Message: Clone + Send + Sync + Serialize {
    fn schema() -> MessageSchema;
    /// Every numeric value carried, for finiteness checks.
    fn values(&self) -> Vec<f64>;

    fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// Per-call context handed to device updates.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext {
    pub round: usize,
    pub local_steps: usize,
    pub device: usize,
}

/// A federated algorithm in broadcast / local update / aggregate form.
pub trait FedAlgorithm: Sync {
    type Server: Clone + Send + Sync;
    type Device: Clone + Send + Sync;
    type Broadcast: Message;
    type Upload: Message;

    fn id(&self) -> &'static str;

    fn hyper_parameters(&self) -> BTreeMap<String, f64>;

    /// Server state before round 1. Receives training data only to read shapes.
    fn init_server(&self, data: &[DeviceDataset], seed: u64) -> Result<Self::Server>;

    fn init_device(&self, k: usize, data: &DeviceDataset, server: &Self::Server) -> Result<Self::Device>;

    fn broadcast(&self, server: &Self::Server, k: usize) -> Self::Broadcast;

    /// `Ok(None)` means the device sits this round out.
    fn device_update(
        &self,
        device: &mut Self::Device,
        data: &DeviceDataset,
        payload: Self::Broadcast,
        ctx: RoundContext,
        rng: &mut StreamRng,
    ) -> Result<Option<Self::Upload>>;

    /// Uploads arrive sorted by device index.
    fn aggregate(&self, server: &mut Self::Server, uploads: Vec<(usize, Self::Upload)>) -> Result<()>;

    /// Scalar diagnostics recorded after each round when monitoring is on.
    fn monitors(&self, _server: &Self::Server, _devices: &[Self::Device], _data: &FederatedDataset) -> BTreeMap<String, f64> {
        BTreeMap::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Participation {
    Full,
    UniformSubset(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_steps: usize,
    #[serde(default = "full")]
    pub participation: Participation,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub monitors: bool,
}

fn full() -> Participation {
    Participation::Full
}

fn yes() -> bool {
    true
}

impl RoundConfig {
    pub fn new(rounds: usize, local_steps: usize, seed: u64) -> Self {
        Self {
            rounds,
            local_steps,
            participation: Participation::Full,
            seed,
            monitors: true,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("at least one communication round is required".into()));
        }
        if self.local_steps == 0 {
            return Err(Error::InvalidArgument("at least one local step is required".into()));
        }
        if let Participation::UniformSubset(m) = self.participation {
            if m == 0 || m > k {
                return Err(Error::InvalidArgument(format!("participation subset {m} outside 1..={k}")));
            }
        }
        Ok(())
    }
}

/// Participants of round `round`, sorted. The draw depends only on
/// `(seed, round)`.
pub fn sample_participants(k: usize, participation: Participation, round: usize, seed: u64) -> Result<Vec<usize>> {
    match participation {
        Participation::Full => Ok((0..k).collect()),
        Participation::UniformSubset(m) if m > k || m == 0 => {
            Err(Error::InvalidArgument(format!("participation subset {m} outside 1..={k}")))
        }
        Participation::UniformSubset(m) => {
            let mut r = rng::stream(seed, "participation", round as u64);
            let mut ids = index::sample(&mut r, k, m).into_vec();
            ids.sort_unstable();
            Ok(ids)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub skipped: Vec<usize>,
    pub monitors: BTreeMap<String, f64>,
}

/// Reproducible record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub algorithm: String,
    pub case: Option<String>,
    pub seed: u64,
    pub hyper_parameters: BTreeMap<String, f64>,
    pub rounds: Vec<RoundRecord>,
    pub metrics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Monitor series as `round,name,value` rows.
    pub fn write_monitors_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["round", "name", "value"])?;
        for r in &self.rounds {
            for (name, value) in &r.monitors {
                w.write_record([r.round.to_string(), name.clone(), format!("{value:?}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Series of one monitor across rounds.
    pub fn monitor(&self, name: &str) -> Vec<f64> {
        self.rounds.iter().filter_map(|r| r.monitors.get(name).copied()).collect()
    }
}

pub struct RunOutput<A: FedAlgorithm + ?Sized> {
    pub server: A::Server,
    pub devices: Vec<A::Device>,
    pub manifest: RunManifest,
}

/// Random stream of device `k` in round `round`.
pub fn device_round_stream(seed: u64, device_id: &str, round: usize) -> StreamRng {
    let base = rng::derive_seed(seed, &format!("device:{device_id}"));
    rng::stream(base, "round", round as u64)
}

/// Runs `cfg.rounds` synchronous rounds on the training part of `data`.
pub fn run_rounds<A: FedAlgorithm>(alg: &A, data: &FederatedDataset, cfg: &RoundConfig) -> Result<RunOutput<A>> {
    cfg.validate(data.k())?;
    let train = data.train_devices();
    let mut server = alg.init_server(&train, cfg.seed)?;
    let mut devices = train
        .iter()
        .enumerate()
        .map(|(k, d)| alg.init_device(k, d, &server))
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = RunManifest {
        algorithm: alg.id().to_string(),
        case: data.case.clone(),
        seed: cfg.seed,
        hyper_parameters: alg.hyper_parameters(),
        rounds: Vec::with_capacity(cfg.rounds),
        metrics: BTreeMap::new(),
        warnings: Vec::new(),
    };

    for round in 1..=cfg.rounds {
        let participants = sample_participants(data.k(), cfg.participation, round, cfg.seed)?;
        let payloads: Vec<A::Broadcast> = participants.iter().map(|&k| alg.broadcast(&server, k)).collect();
        let mut states: Vec<A::Device> = participants.iter().map(|&k| devices[k].clone()).collect();
        let results: Vec<Result<Option<A::Upload>>> = states
            .par_iter_mut()
            .zip(payloads.into_par_iter())
            .zip(participants.par_iter())
            .map(|((state, payload), &k)| {
                let ctx = RoundContext {
                    round,
                    local_steps: cfg.local_steps,
                    device: k,
                };
                let mut r = device_round_stream(cfg.seed, train[k].id(), round);
                let up = alg.device_update(state, &train[k], payload, ctx, &mut r)?;
                if let Some(u) = &up {
                    if !u.is_finite() {
                        return Err(Error::NonFinite(format!("upload {}", A::Upload::schema().message)));
                    }
                }
                Ok(up)
            })
            .collect();

        let mut uploads = Vec::with_capacity(participants.len());
        let mut skipped = Vec::new();
        for ((&k, state), res) in participants.iter().zip(states).zip(results) {
            match res {
                Ok(Some(u)) => uploads.push((k, u)),
                Ok(None) => skipped.push(k),
                Err(e) => {
                    return Err(Error::DeviceFailure {
                        device: k,
                        round,
                        source: Box::new(e),
                    })
                }
            }
            devices[k] = state;
        }
        alg.aggregate(&mut server, uploads)?;
        let monitors = if cfg.monitors {
            alg.monitors(&server, &devices, data)
        } else {
            BTreeMap::new()
        };
        manifest.rounds.push(RoundRecord {
            round,
            participants,
            skipped,
            monitors,
        });
    }
    Ok(RunOutput {
        server,
        devices,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    #[derive(Clone, Serialize)]
    struct Scalar(f64);

    impl Message for Scalar {
        fn schema() -> MessageSchema {
            MessageSchema {
                message: "scalar",
                fields: vec![FieldSpec {
                    name: "value",
                    shape: FieldShape::Scalar,
                }],
            }
        }
        fn values(&self) -> Vec<f64> {
            vec![self.0]
        }
    }

    /// Server holds a running sum of uploaded random numbers.
    struct Summer {
        poison: Option<usize>,
    }

    impl FedAlgorithm for Summer {
        type Server = f64;
        type Device = f64;
        type Broadcast = Scalar;
        type Upload = Scalar;

        fn id(&self) -> &'static str {
            "summer"
        }
        fn hyper_parameters(&self) -> BTreeMap<String, f64> {
            BTreeMap::new()
        }
        fn init_server(&self, _: &[DeviceDataset], _: u64) -> Result<f64> {
            Ok(0.0)
        }
        fn init_device(&self, _: usize, _: &DeviceDataset, _: &f64) -> Result<f64> {
            Ok(0.0)
        }
        fn broadcast(&self, s: &f64, _: usize) -> Scalar {
            Scalar(*s)
        }
        fn device_update(&self, d: &mut f64, _: &DeviceDataset, _: Scalar, ctx: RoundContext, rng: &mut StreamRng) -> Result<Option<Scalar>> {
            if self.poison == Some(ctx.device) {
                return Ok(Some(Scalar(f64::NAN)));
            }
            *d = rng.random::<f64>();
            Ok(Some(Scalar(*d)))
        }
        fn aggregate(&self, s: &mut f64, uploads: Vec<(usize, Scalar)>) -> Result<()> {
            *s += uploads.iter().map(|u| u.1 .0).sum::<f64>();
            Ok(())
        }
        fn monitors(&self, s: &f64, _: &[f64], _: &FederatedDataset) -> BTreeMap<String, f64> {
            BTreeMap::from([("sum".to_string(), *s)])
        }
    }

    fn data(k: usize) -> FederatedDataset {
        let devs = (0..k)
            .map(|i| DeviceDataset::new(format!("d{i}"), DMatrix::from_element(1, 2, 1.0), DVector::zeros(2)).unwrap())
            .collect();
        FederatedDataset::new(devs).unwrap()
    }

    #[test]
    fn zero_rounds_rejected() {
        let cfg = RoundConfig::new(0, 1, 1);
        assert!(run_rounds(&Summer { poison: None }, &data(3), &cfg).is_err());
    }

    #[test]
    fn full_participation_lists_everyone() {
        let out = run_rounds(&Summer { poison: None }, &data(5), &RoundConfig::new(3, 1, 1)).unwrap();
        assert_eq!(out.manifest.rounds.len(), 3);
        assert!(out.manifest.rounds.iter().all(|r| r.participants == vec![0, 1, 2, 3, 4]));
    }

    #[test]
    fn subset_participation_contract() {
        let mut cfg = RoundConfig::new(20, 1, 3);
        cfg.participation = Participation::UniformSubset(4);
        let out = run_rounds(&Summer { poison: None }, &data(36), &cfg).unwrap();
        for r in &out.manifest.rounds {
            assert_eq!(r.participants.len(), 4);
            assert!(r.participants.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(sample_participants(7, Participation::UniformSubset(7), 1, 0).unwrap(), (0..7).collect::<Vec<_>>());
        assert!(sample_participants(7, Participation::UniformSubset(8), 1, 0).is_err());
    }

    #[test]
    fn participation_is_uniform() {
        let mut counts = vec![0usize; 100];
        for round in 0..10_000 {
            for k in sample_participants(100, Participation::UniformSubset(10), round, 5).unwrap() {
                counts[k] += 1;
            }
        }
        assert!(counts.iter().all(|&c| (900..=1100).contains(&c)), "{counts:?}");
    }

    #[test]
    fn round_draw_independent_of_history() {
        let a = sample_participants(50, Participation::UniformSubset(5), 17, 9).unwrap();
        let _ = sample_participants(50, Participation::UniformSubset(5), 3, 9).unwrap();
        assert_eq!(a, sample_participants(50, Participation::UniformSubset(5), 17, 9).unwrap());
    }

    #[test]
    fn manifests_are_deterministic() {
        let cfg = RoundConfig::new(4, 1, 11);
        let a = run_rounds(&Summer { poison: None }, &data(6), &cfg).unwrap().manifest;
        let b = run_rounds(&Summer { poison: None }, &data(6), &cfg).unwrap().manifest;
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.monitor("sum").len(), 4);
    }

    #[test]
    fn nonfinite_upload_names_device_and_round() {
        let err = run_rounds(&Summer { poison: Some(2) }, &data(4), &RoundConfig::new(2, 1, 1)).err().unwrap();
        match err {
            Error::DeviceFailure { device, round, source } => {
                assert_eq!((device, round), (2, 1));
                assert!(matches!(*source, Error::NonFinite(_)));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn monitors_csv_has_header() {
        let out = run_rounds(&Summer { poison: None }, &data(2), &RoundConfig::new(2, 1, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        out.manifest.write_monitors_csv(&path).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert!(text.starts_with("round,name,value\n1,sum,"));
    }
}
