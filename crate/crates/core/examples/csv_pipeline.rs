//! Flat table to devices: group by a column, one-hot encode nominal
//! columns, standardize, then select predictors with a ridge prior.
//!
//! cargo run --release --example csv_pipeline

use std::io::Write;

use fedhier::datasets::{load_csv_federated, CsvSchema, SplitPolicy};
use fedhier::hm2::{federated_posteriors, select_variables, Ep, EpConfig, HierModelSpec, McmcConfig};
use fedhier::runtime::{run_rounds, RoundConfig};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

fn main() -> fedhier::Result<()> {
    let path = std::env::temp_dir().join("fedhier_csv_pipeline.csv");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let mut f = std::fs::File::create(&path).map_err(|e| fedhier::Error::InvalidArgument(e.to_string()))?;
    writeln!(f, "school,study,absences,noise,sex,score").unwrap();
    for (school, n) in [("north", 120), ("south", 80), ("east", 60)] {
        for _ in 0..n {
            let study: f64 = rng.random_range(1.0..4.0);
            let absences: f64 = rng.random_range(0.0..20.0);
            let noise: f64 = rng.sample(StandardNormal);
            let sex = if rng.random_bool(0.5) { "F" } else { "M" };
            let e: f64 = rng.sample(StandardNormal);
            let score = 10.0 + 1.5 * study - 0.2 * absences + e;
            writeln!(f, "{school},{study:.3},{absences:.3},{noise:.3},{sex},{score:.3}").unwrap();
        }
    }
    drop(f);

    let schema = CsvSchema {
        device_column: "school".into(),
        target_column: "score".into(),
        dummy_encode: vec!["sex".into()],
        standardize: true,
        drop: vec![],
    };
    let data = load_csv_federated(&path, &schema, Some((SplitPolicy::FractionPerDevice(0.8), 4)))?;
    println!("{} devices, {} columns (intercept first)", data.k(), data.dim());
    if let Some(s) = &data.standardizer {
        println!("standardized {:?}", s.names);
    }
    let spec = HierModelSpec::ridge(data.dim(), true)?;
    let out = run_rounds(&Ep::new(spec.clone(), EpConfig::default())?, &data, &RoundConfig::new(10, 1, 4))?;
    let draws = federated_posteriors(&spec, &out.server, &out.devices, &McmcConfig::default(), 4)?;
    for (dev, d) in data.devices.iter().zip(&draws) {
        println!("{:<6} included {:?}", dev.id(), select_variables(&d.theta, 0.9)?);
    }
    Ok(())
}
