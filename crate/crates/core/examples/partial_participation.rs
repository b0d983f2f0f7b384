//! Only a random subset of devices takes part in each round.
//!
//! cargo run --release --example partial_participation -- [devices per round]

use fedhier::baselines::Coefficients;
use fedhier::datasets::{generate, CaseId, SyntheticCaseSpec};
use fedhier::hm1::{Hm1, Hm1Config};
use fedhier::metrics::evaluate;
use fedhier::runtime::{run_rounds, Participation, RoundConfig};

fn main() -> fedhier::Result<()> {
    let m: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let data = generate(&SyntheticCaseSpec::new(CaseId::Hm1II, 7))?;
    let alg = Hm1::new(Hm1Config::default())?;
    for participation in [Participation::Full, Participation::UniformSubset(m)] {
        let cfg = RoundConfig {
            participation,
            ..RoundConfig::new(40, 30, 7)
        };
        let out = run_rounds(&alg, &data, &cfg)?;
        let theta = alg.coefficients(&out.server, &out.devices, &data)?;
        let report = evaluate(&theta, &data, &CaseId::Hm1II.eval_devices(data.k()))?;
        println!("{participation:?}: round 1 devices {:?}", &out.manifest.rounds[0].participants);
        println!("  a_rmse {:.4}  param_error {:.4}", report.a_rmse, report.param_error.unwrap_or(f64::NAN));
    }
    Ok(())
}
