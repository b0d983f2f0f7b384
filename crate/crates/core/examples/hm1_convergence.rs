//! Distance between estimated and true coefficients after every round.
//!
//! cargo run --release --example hm1_convergence -- [case] [rounds]

use fedhier::datasets::{generate, CaseId, SyntheticCaseSpec};
use fedhier::hm1::{Hm1, Hm1Config};
use fedhier::runtime::{run_rounds, RoundConfig};

fn main() -> fedhier::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let case: CaseId = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(CaseId::Hm1II);
    let rounds: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let data = generate(&SyntheticCaseSpec::new(case, 1))?;
    let out = run_rounds(&Hm1::new(Hm1Config::default())?, &data, &RoundConfig::new(rounds, 30, 1))?;
    println!("round,param_error");
    for (t, e) in out.manifest.monitor("param_error").iter().enumerate() {
        println!("{},{e:.6}", t + 1);
    }
    Ok(())
}
