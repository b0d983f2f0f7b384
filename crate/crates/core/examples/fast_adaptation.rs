//! A device that never trained: combine the learned hyper-parameter
//! posterior with its few local observations.
//!
//! cargo run --release --example fast_adaptation -- [seed] [rows]

use fedhier::datasets::{generate, CaseId, FederatedDataset, SyntheticCaseSpec};
use fedhier::hm2::{adapt_new_device, Ep, EpConfig, HierModelSpec, McmcConfig};
use fedhier::runtime::{run_rounds, RoundConfig};
use rand::SeedableRng;

fn main() -> fedhier::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let rows: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let full = generate(&SyntheticCaseSpec::new(CaseId::Uq100, seed))?;
    let k = full.k();
    let newcomer = full.train(k - 1).subset(&(0..rows).collect::<Vec<_>>());
    let truth = full.true_theta.as_ref().expect("synthetic truth").column(k - 1).into_owned();
    let mut data = FederatedDataset::new(full.devices[..k - 1].to_vec())?;
    data.splits = full.splits.as_ref().map(|s| s[..k - 1].to_vec());

    let spec = HierModelSpec::uq();
    let out = run_rounds(&Ep::new(spec.clone(), EpConfig::default())?, &data, &RoundConfig::new(20, 1, seed))?;
    let q = out.server.posterior()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let post = adapt_new_device(&spec, &q, &newcomer, &McmcConfig::default(), &mut rng)?;
    let prior_only = adapt_new_device(&spec, &q, &newcomer.subset(&[]), &McmcConfig::default(), &mut rng)?;
    println!("truth       {:.3?}", truth.as_slice());
    println!("prior mean  {:.3?}", prior_only.mean().as_slice());
    println!("{rows} rows    {:.3?}", post.mean().as_slice());
    Ok(())
}
