//! Two devices, one data-poor: the covariance-graph model against each
//! device fitting alone, device-1 held-out RMSE over several seeds.
//!
//! cargo run --release --example hm1_case_one -- [seeds]

use fedhier::baselines::{Coefficients, Separate, SgdConfig};
use fedhier::datasets::{generate, CaseId, SyntheticCaseSpec};
use fedhier::hm1::{Hm1, Hm1Config};
use fedhier::metrics::{evaluate, mean_sd};
use fedhier::runtime::{run_rounds, RoundConfig};

fn main() -> fedhier::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let hm1 = Hm1::new(Hm1Config::default())?;
    let sep = Separate::new(SgdConfig::default())?;
    let (mut a, mut b) = (vec![], vec![]);
    for seed in 1..=seeds {
        let data = generate(&SyntheticCaseSpec::new(CaseId::Hm1I, seed))?;
        let t0 = std::time::Instant::now();
        let out = run_rounds(&hm1, &data, &RoundConfig::new(20, 30, seed))?;
        let took = t0.elapsed();
        let h = evaluate(&hm1.coefficients(&out.server, &out.devices, &data)?, &data, &[0])?.a_rmse;
        let out = run_rounds(&sep, &data, &RoundConfig::new(1, 600, seed))?;
        let s = evaluate(&sep.coefficients(&out.server, &out.devices, &data)?, &data, &[0])?.a_rmse;
        println!("seed {seed:2}  hm1 {h:.4}  separate {s:.4}  ({took:.1?})");
        a.push(h);
        b.push(s);
    }
    let ((ma, sa), (mb, sb)) = (mean_sd(&a), mean_sd(&b));
    println!("mean  hm1 {ma:.4} ± {sa:.4}  separate {mb:.4} ± {sb:.4}");
    Ok(())
}
