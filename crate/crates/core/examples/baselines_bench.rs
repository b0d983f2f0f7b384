//! All four algorithms on heterogeneous polynomial-trend devices.
//!
//! cargo run --release --example baselines_bench -- [seeds]

use fedhier::baselines::SgdConfig;
use fedhier::cli::{run_algorithm, AlgorithmConfig, DittoConfig};
use fedhier::datasets::{generate, CaseId, SyntheticCaseSpec};
use fedhier::hm1::Hm1Config;
use fedhier::metrics::mean_sd;
use fedhier::runtime::RoundConfig;

fn main() -> fedhier::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let algs = [
        (AlgorithmConfig::Hm1(Hm1Config { alpha: 0.9, ..Hm1Config::default() }), RoundConfig::new(20, 100, 0)),
        (AlgorithmConfig::Ditto(DittoConfig::default()), RoundConfig::new(20, 100, 0)),
        (AlgorithmConfig::Separate(SgdConfig::default()), RoundConfig::new(1, 2000, 0)),
        (AlgorithmConfig::FedAvg(SgdConfig::default()), RoundConfig::new(20, 100, 0)),
    ];
    let mut scores = vec![vec![]; algs.len()];
    for seed in 1..=seeds {
        let data = generate(&SyntheticCaseSpec::new(CaseId::PolySurrogate, seed))?;
        for (i, (alg, rounds)) in algs.iter().enumerate() {
            let rounds = RoundConfig { seed, ..rounds.clone() };
            scores[i].push(run_algorithm(alg, &data, &rounds)?.manifest.metrics["a_rmse"]);
        }
    }
    for ((alg, _), s) in algs.iter().zip(&scores) {
        let (m, sd) = mean_sd(s);
        println!("{:<9} {m:.4} ± {sd:.4}", alg.id());
    }
    Ok(())
}
