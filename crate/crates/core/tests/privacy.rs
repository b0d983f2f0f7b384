use fedhier::baselines::{Ditto, FedAvg, Separate};
use fedhier::datasets::{generate, CaseId, CaseOverrides, FederatedDataset, SyntheticCaseSpec};
use fedhier::hm1::Hm1;
use fedhier::hm2::{Ep, EpConfig, HierModelSpec};
use fedhier::runtime::{builtin_schemas, device_round_stream, privacy_audit, FedAlgorithm, Message, RoundContext};

#[test]
fn audit_passes_for_every_builtin() {
    privacy_audit().unwrap();
    let ids: Vec<&str> = builtin_schemas().iter().map(|(id, _)| *id).collect();
    for id in ["hm1", "hm2-ep", "fedavg", "ditto", "separate"] {
        assert_eq!(ids.iter().filter(|i| **i == id).count(), 2, "{id}");
    }
}

fn data(rows: usize) -> FederatedDataset {
    generate(&SyntheticCaseSpec {
        case: CaseId::Hm2I,
        seed: 4,
        overrides: CaseOverrides {
            k: Some(6),
            sample_sizes: Some(vec![rows; 6]),
            ..CaseOverrides::default()
        },
    })
    .unwrap()
}

/// Sizes of every message of one round.
fn message_sizes<A: FedAlgorithm>(alg: &A, data: &FederatedDataset, hyper: usize) -> Vec<usize> {
    let train = data.train_devices();
    let (d, k) = (data.dim(), data.k());
    let server = alg.init_server(&train, 1).unwrap();
    let mut sizes = Vec::new();
    for (i, dev) in train.iter().enumerate() {
        let mut state = alg.init_device(i, dev, &server).unwrap();
        let b = alg.broadcast(&server, i);
        let expected = A::Broadcast::schema().value_count(d, k, hyper, 0);
        assert_eq!(b.values().len(), expected, "{} broadcast", alg.id());
        sizes.push(expected);
        let ctx = RoundContext {
            round: 1,
            local_steps: 3,
            device: i,
        };
        if let Some(u) = alg.device_update(&mut state, dev, b, ctx, &mut device_round_stream(1, dev.id(), 1)).unwrap() {
            let expected = A::Upload::schema().value_count(d, k, hyper, 0);
            assert_eq!(u.values().len(), expected, "{} upload", alg.id());
            sizes.push(u.values().len());
        }
    }
    sizes
}

#[test]
fn message_sizes_do_not_depend_on_sample_size() {
    let (small, large) = (data(30), data(300));
    let d = small.dim();
    let mut ep = Ep::new(HierModelSpec::lasso(d, false).unwrap(), EpConfig { draws: 128, ..EpConfig::default() }).unwrap();
    ep.spec.marginal_draws = 64;
    let checks: Vec<(Vec<usize>, Vec<usize>)> = vec![
        (message_sizes(&Hm1::default(), &small, 0), message_sizes(&Hm1::default(), &large, 0)),
        (message_sizes(&ep, &small, 2), message_sizes(&ep, &large, 2)),
        (message_sizes(&FedAvg::default(), &small, 0), message_sizes(&FedAvg::default(), &large, 0)),
        (message_sizes(&Ditto::default(), &small, 0), message_sizes(&Ditto::default(), &large, 0)),
        (message_sizes(&Separate::default(), &small, 0), message_sizes(&Separate::default(), &large, 0)),
    ];
    for (a, b) in checks {
        assert_eq!(a, b);
        assert!(a.iter().all(|&s| s <= 2 * d + 4), "{a:?}");
    }
}
