//! Federated hierarchical linear regression.
//!
//! Each device holds a small regression problem. A simulated server runs
//! rounds of parameter-only messages through [`runtime::run_rounds`].
//!
//! - [`hm1`]: matrix-normal prior over device coefficients with a learned
//!   device covariance.
//! - [`hm2`]: shared hyper-parameters fitted by expectation propagation,
//!   then per-device posterior sampling and interval-based selection.
//! - [`baselines`]: FedAvg, Ditto, separate training, ridge and lasso.
//!
//! The `examples/` directory is the best starting point:
//!
//! ```no_run
//! use fedhier::datasets::{generate, CaseId, SyntheticCaseSpec};
//! use fedhier::hm1::{Hm1, Hm1Config};
//! use fedhier::runtime::{run_rounds, RoundConfig};
//!
//! let data = generate(&SyntheticCaseSpec::new(CaseId::Hm1II, 1))?;
//! let out = run_rounds(&Hm1::new(Hm1Config::default())?, &data, &RoundConfig::new(20, 30, 1))?;
//! println!("{:?}", out.manifest.monitor("param_error"));
//! # Ok::<(), fedhier::Error>(())
//! ```

pub mod baselines;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod gaussian;
pub mod hm1;
pub mod hm2;
pub mod metrics;
pub mod rng;
pub mod runtime;

pub use error::{Error, Result};
