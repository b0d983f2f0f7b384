//! Hierarchical model with shared hyper-parameters fitted by federated
//! expectation propagation, plus device-level posterior sampling and
//! credible-interval variable selection.

pub mod ep;
pub mod mcmc;
pub mod model;
pub mod select;

pub use ep::{Ep, EpConfig, EpDevice, EpServer};
pub use model::{DeviceStats, HierModelSpec, ModelKind, NoiseModel};
pub use mcmc::{adapt_new_device, device_posterior_sample, federated_posteriors, McmcConfig, PosteriorDraws, ThetaPosterior};
pub use select::{credible_interval, select_variables};
