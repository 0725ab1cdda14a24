//! Multilevel regression and poststratification (MRP) for surveillance data.
//!
//! The crate covers the whole workflow: ingesting individual test records,
//! linking them to population and ZIP-level covariate tables, fitting
//! multilevel binomial models with a sensitivity/specificity measurement
//! model using a built-in No-U-Turn sampler, model comparison with PSIS-LOO
//! and posterior predictive checks, and poststratified estimates by week,
//! demographic group and county.
//!
//! The modules follow the stages of an analysis:
//!
//! * [`data`] parses, imputes, filters, aggregates and links the inputs.
//! * [`model`] compiles a [`model::ModelSpec`] into index arrays and an
//!   analytic log-posterior with gradient.
//! * [`sampler`] runs NUTS with warmup adaptation and summarizes draws.
//! * [`loo`] and [`ppc`] are the diagnostics.
//! * [`poststrat`] turns posterior draws into population estimates.
//! * [`pipeline`] wires the stages into a reproducible run directory; it is
//!   shared by the command-line tool and the HTTP service.

pub mod data;
pub mod describe;
pub mod error;
pub mod loo;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod poststrat;
pub mod ppc;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
