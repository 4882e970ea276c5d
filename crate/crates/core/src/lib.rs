//! Bayesian estimation of risk-factor prevalence from health examination
//! surveys with selective non-participation, using linked follow-up data.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod exposure;
pub mod model;
pub mod output;
pub mod sampler;
pub mod simulate;
pub mod trend;
