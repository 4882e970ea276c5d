//! Metropolis-within-Gibbs sampler with data augmentation.
//!
//! One iteration imputes every missing smoking indicator from its full
//! conditional, updates the aggregated sufficient statistics incrementally,
//! runs a few sweeps of random-walk Metropolis over the coefficient blocks and
//! finally redraws the baseline hazard bin by bin from truncated-Gamma
//! conditionals.

mod blocks;
mod chain;
mod state;
mod truncated_gamma;

#[cfg(test)]
mod tests;

pub use blocks::{metropolis_update_block, BlockId, BlockProposal, StepSizes};
pub use chain::{
    chain_rng, gibbs_impute_missing, run_chain, run_parallel, update_hazard_bin, BlockAcceptance,
    ChainOutput, Mode, SamplerConfig,
};
pub use state::{PreparedData, SuffStats};
pub use truncated_gamma::sample_truncated_gamma;
