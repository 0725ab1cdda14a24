//! No-U-Turn sampler with warmup adaptation, multi-chain runs and
//! convergence summaries.

mod adapt;
mod convergence;
mod draws;
mod nuts;
mod summary;
pub mod targets;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{constrain, ModelData};

pub use adapt::{warmup_windows, DualAveraging, WarmupSchedule};
pub use convergence::{ess_bulk, ess_tail, rank_normalize, split_chains, split_rhat};
pub use draws::{ChainInfo, DrawStats, DrawsMatrix};
pub use nuts::{leapfrog, run_chain, Chain, Nuts, PhaseState};
pub use summary::{
    model_summary_rows, summarize, summarize_all, Section, SummaryRow, SummarySpec, SummaryTable,
    SUMMARY_COLUMNS,
};

/// A differentiable log density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns `log p(x)` and writes its gradient into `grad`. May return a
    /// non-finite value, which the sampler treats as a divergence.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Sampling,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Sampling => "sampling",
        }
    }
}

/// Receives per-iteration progress. Called from sampling threads.
pub trait Progress: Sync {
    fn update(&self, stage: Stage, chain: usize, iteration: usize);
}

impl Progress for () {
    fn update(&self, _: Stage, _: usize, _: usize) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup_iters: usize,
    pub sampling_iters: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub init_radius: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup_iters: 1000,
            sampling_iters: 2500,
            seed: 1,
            target_accept: 0.8,
            max_tree_depth: 10,
            init_radius: 2.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("sampler: {m}")));
        if self.chains == 0 {
            return bad("chains must be at least 1");
        }
        if self.sampling_iters == 0 {
            return bad("sampling_iters must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must be in (0, 1)");
        }
        if self.max_tree_depth == 0 {
            return bad("max_tree_depth must be at least 1");
        }
        if !(self.init_radius >= 0.0 && self.init_radius.is_finite()) {
            return bad("init_radius must be non-negative");
        }
        Ok(())
    }
}

/// Runs every chain on `target` and keeps post-warmup draws, mapped through
/// `transform` and labelled with `names`.
pub fn run_nuts<D, F>(
    target: &D,
    cfg: &SamplerConfig,
    names: Vec<String>,
    transform: F,
    progress: &dyn Progress,
) -> Result<DrawsMatrix>
where
    D: LogDensity,
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    cfg.validate()?;
    let one = |c: usize| run_chain(target, cfg, c, &transform, progress);

    #[cfg(feature = "parallel")]
    let chains: Vec<Result<Chain>> = {
        use rayon::prelude::*;
        (0..cfg.chains).into_par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let chains: Vec<Result<Chain>> = (0..cfg.chains).map(one).collect();

    let chains = chains.into_iter().collect::<Result<Vec<_>>>()?;
    let draws = DrawsMatrix::from_chains(names, cfg.sampling_iters, chains);
    let total = draws.n_draws();
    if total > 0 && draws.divergences() == total {
        return Err(Error::Sampling(
            "every post-warmup transition diverged".into(),
        ));
    }
    Ok(draws)
}

/// Samples a compiled model. Draws are on the constrained scale and labelled
/// by the layout.
pub fn sample_model(
    data: &ModelData,
    cfg: &SamplerConfig,
    progress: &dyn Progress,
) -> Result<DrawsMatrix> {
    run_nuts(
        data,
        cfg,
        data.layout.labels(),
        |x| constrain(data, x),
        progress,
    )
}
