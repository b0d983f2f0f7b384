use std::fs;

use fedhier::cli::{cmd_fit, ExperimentConfig};

fn engine_csv(dir: &std::path::Path) -> std::path::PathBuf {
    let p = dir.join("engines.csv");
    let mut text = String::from("unit,cycle,sensor,setting\n");
    for u in 1..=5 {
        for c in 1..=(20 + 4 * u) {
            let t = c as f64;
            text += &format!("{u},{c},{},{}\n", 640.0 + 0.01 * u as f64 * t + 0.0005 * t * t, c % 3);
        }
    }
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn polynomial_source_fits_with_time_split() {
    let dir = tempfile::tempdir().unwrap();
    let csv = engine_csv(dir.path());
    let mut c = ExperimentConfig::from_toml(&format!(
        "[data]\nsource = \"polynomial\"\npath = \"{}\"\ndevice_column = \"unit\"\ntime_column = \"cycle\"\ntarget_column = \"sensor\"\norder = 2\n\
         split = {{ policy = \"time_prefix\", fraction = 0.75 }}\n[algorithm]\nid = \"separate\"\neta = 0.01\nbatch = \"full\"\n\
         [rounds]\nrounds = 1\nlocal_steps = 3000\n",
        csv.display()
    ))
    .unwrap();
    let data = c.load_data(0).unwrap();
    assert_eq!((data.k(), data.dim()), (5, 3));
    let s = &data.splits.as_ref().unwrap()[0];
    assert!(s.train.iter().max() < s.test.iter().min());
    c.output_dir = dir.path().join("out");
    let m = cmd_fit(&c).unwrap();
    assert!(m[0].metrics["a_rmse"].is_finite());
    let coef = fs::read_to_string(c.output_dir.join("run-000/coefficients.csv")).unwrap();
    assert_eq!(coef.lines().count(), 1 + 5 * 3);
}

#[test]
fn missing_polynomial_column_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = engine_csv(dir.path());
    let c = ExperimentConfig::from_toml(&format!(
        "[data]\nsource = \"polynomial\"\npath = \"{}\"\ndevice_column = \"unit\"\ntime_column = \"time\"\ntarget_column = \"sensor\"\norder = 2\n",
        csv.display()
    ))
    .unwrap();
    let e = c.load_data(0).unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
}

#[test]
fn ep_fit_reports_hyper_posterior() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::from_toml(
        "[data]\nsource = \"synthetic\"\ncase = \"UQ-100\"\noverrides = { k = 20 }\n\
         [algorithm]\nid = \"hm2-ep\"\nmodel = { kind = \"uq_model\" }\n[rounds]\nrounds = 4\nlocal_steps = 1\n",
    )
    .unwrap();
    c.output_dir = dir.path().to_path_buf();
    let m = cmd_fit(&c).unwrap();
    assert!(m[0].metrics.contains_key("a_rmse"));
    assert!(m[0].rounds[3].monitors.contains_key("mean:mu[1]"));
    let phi = fs::read_to_string(dir.path().join("run-000/phi.csv")).unwrap();
    let lines: Vec<&str> = phi.lines().collect();
    assert_eq!(lines[0], "parameter,mean,sd,lower90,upper90");
    assert_eq!(lines.len(), 1 + 8);
    assert!(lines[1].starts_with("mu[1],"));
}
