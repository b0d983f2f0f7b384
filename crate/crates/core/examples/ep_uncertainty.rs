//! Uncertainty about shared hyper-parameters: 100 devices, federated EP on
//! the mean-field model, 90% intervals for the population mean.
//!
//! cargo run --release --example ep_uncertainty -- [seed]

use fedhier::datasets::{generate, CaseId, SyntheticCaseSpec, UQ_MEAN};
use fedhier::hm2::{credible_interval, Ep, EpConfig, HierModelSpec};
use fedhier::runtime::{run_rounds, RoundConfig};
use rand::SeedableRng;

fn main() -> fedhier::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let t0 = std::time::Instant::now();
    let data = generate(&SyntheticCaseSpec::new(CaseId::Uq100, seed))?;
    let ep = Ep::new(HierModelSpec::uq(), EpConfig::default())?;
    let out = run_rounds(&ep, &data, &RoundConfig::new(20, 1, seed))?;
    let q = out.server.posterior()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<_> = (0..10_000).map(|_| q.sample(&mut rng)).collect();
    for (i, truth) in UQ_MEAN.iter().enumerate() {
        let s: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        let (lo, hi) = credible_interval(&s, 0.9)?;
        let tau = q.mean()[4 + i].exp();
        println!("mu[{}] = {:.3}  90% CI ({:.3}, {:.3})  truth {truth}  covered {}  tau {:.2}", i + 1, q.mean()[i], lo, hi, lo <= *truth && *truth <= hi, tau);
    }
    println!("{:.1?}", t0.elapsed());
    Ok(())
}
