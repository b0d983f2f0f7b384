//! Sparse coefficient selection: federated EP over the Laplace prior's
//! hyper-parameters, then per-device posterior draws and 90% intervals.
//!
//! cargo run --release --example variable_selection -- [case] [seed]

use fedhier::datasets::{generate, CaseId, SyntheticCaseSpec};
use fedhier::hm2::{federated_posteriors, select_variables, Ep, EpConfig, HierModelSpec, McmcConfig};
use fedhier::metrics::inclusion_rates;
use fedhier::runtime::{run_rounds, RoundConfig};

fn main() -> fedhier::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let case: CaseId = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(CaseId::Hm2I);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let t0 = std::time::Instant::now();
    let data = generate(&SyntheticCaseSpec::new(case, seed))?;
    let mut spec = HierModelSpec::lasso(data.dim(), false)?;
    spec.marginal_draws = 128;
    let ep = Ep::new(spec.clone(), EpConfig { draws: 256, ..EpConfig::default() })?;
    let out = run_rounds(&ep, &data, &RoundConfig::new(8, 1, seed))?;
    for r in &out.manifest.rounds {
        println!("round {:2}  log_lambda {:+.3} (sd {:.3})  log_sigma2 {:+.3}  skipped {:?}", r.round, r.monitors["mean:log_lambda"], r.monitors["sd:log_lambda"], r.monitors["mean:log_sigma2"], r.skipped);
    }
    let draws = federated_posteriors(&spec, &out.server, &out.devices, &McmcConfig::default(), seed)?;
    let masks = draws.iter().map(|d| select_variables(&d.theta, 0.9)).collect::<fedhier::Result<Vec<_>>>()?;
    let truth = data.true_theta.as_ref().expect("synthetic truth");
    let support: Vec<bool> = truth.column(0).iter().map(|v| *v != 0.0).collect();
    let rates = inclusion_rates(&masks, &support)?;
    let acc: Vec<String> = draws.iter().map(|d| format!("{:.2}", d.acceptance)).collect();
    println!("acceptance {}", acc.join(" "));
    println!("correct inclusion {:.3}  false inclusion {:.3}  ({:.1?})", rates.correct_rate, rates.false_rate, t0.elapsed());
    Ok(())
}
