//! Model specification, compilation and the log-posterior.
//!
//! Incidence in cell `j` is
//!
//! ```text
//! logit π_j = β₁ + β₂·male_j + α·Z_s[j] + α_age[a[j]] + α_race[r[j]] + α_time[t[j]] + e_s[j]
//! ```
//!
//! and the observed count is `y_j ~ Binomial(n_j, p_j)` with
//! `p_j = (1 − γ)(1 − π_j) + δ·π_j` for sensitivity δ and specificity γ.
//! Varying effects are non-centered (`α = σ·z`, `z ~ N(0, 1)`) and each σ is
//! sampled as `log σ`.

mod compile;
mod density;
mod spec;

pub use compile::{
    compile_spec, compile_spec_with_ages, Block, BlockKind, CellIndex, Layout, Levels, ModelData,
    SlopeData,
};
pub use density::{
    adjust_positivity, binomial_constant, cell_incidence, constrain, grad_log_posterior,
    log_likelihood, log_posterior, log_prior, pointwise_cell_loglik, unconstrain, value_and_grad,
    Effects, Measurement,
};
pub use spec::{
    Factor, FieldError, Likelihood, ModelSpec, Outcome, PriorConfig, VaryingSlope,
};
