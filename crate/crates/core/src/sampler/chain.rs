use std::time::Instant;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::blocks::{
    collapsed_log_target, metropolis_step, metropolis_update_block, BlockId, BlockProposal, StepSizes,
};
use super::state::{PreparedData, SuffStats};
use super::truncated_gamma::sample_truncated_gamma;
use crate::data::{PersonRecord, N_CELLS};
use crate::error::ModelError;
use crate::exposure::{FollowUp, RiskGroupTable, N_AGE_BINS};
use crate::model::{
    hazard_is_admissible, imputation_log_odds, inv_logit, CumulativeBaseline, ModelParams,
    PriorSpec,
};

/// Whether selection on smoking and the follow-up model are part of the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Full selection model: `eta` free, survival likelihood included.
    Mnar,
    /// `eta` fixed at zero; survival model dropped.
    Mar,
}

impl Mode {
    pub fn fixed_eta(self) -> bool {
        self == Mode::Mar
    }

    pub fn uses_survival(self) -> bool {
        self == Mode::Mnar
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub burn_in: usize,
    pub iterations: usize,
    pub thin: usize,
    /// Metropolis sweeps over the coefficient blocks per imputation step.
    #[serde(default = "default_sweeps")]
    pub block_sweeps: usize,
    /// Iterations between proposal-shape refreshes during burn-in.
    pub adapt_window: usize,
    pub target_acceptance: f64,
    pub initial_steps: StepSizes,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 7,
            burn_in: 9000,
            iterations: 45_900,
            thin: 75,
            block_sweeps: default_sweeps(),
            adapt_window: 100,
            target_acceptance: 0.35,
            initial_steps: StepSizes::default(),
            seed: 1,
            mode: Mode::Mnar,
        }
    }
}

fn default_sweeps() -> usize {
    5
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_chains == 0
            || self.iterations == 0
            || self.thin == 0
            || self.adapt_window == 0
            || self.block_sweeps == 0 {
            return bad("chains, iterations, thin, sweeps and adaptation window must be positive");
        }
        if !self.iterations.is_multiple_of(self.thin) {
            return bad("thin must divide iterations");
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return bad("target acceptance must lie in (0, 1)");
        }
        if !(self.initial_steps.intercept > 0.0 && self.initial_steps.slope > 0.0) {
            return bad("initial step sizes must be positive");
        }
        Ok(())
    }

    pub fn recorded_draws(&self) -> usize {
        self.iterations / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: String,
    pub rate: f64,
}

/// Thinned output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub chain: usize,
    /// Parameter vectors in [`crate::model::parameter_names`] order.
    pub draws: Vec<Vec<f64>>,
    /// Smokers (observed plus imputed) per reporting cell at each draw.
    pub smokers: Vec<[u32; N_CELLS]>,
    /// Post-burn-in acceptance rate per Metropolis block.
    pub acceptance: Vec<BlockAcceptance>,
    pub seconds_per_iteration: f64,
    pub warnings: Vec<String>,
}

/// Draws every missing smoking indicator from its full conditional.
///
/// Participants keep their observed value. `current` is ignored for
/// non-participants since each draw only depends on the parameters.
pub fn gibbs_impute_missing<R: Rng + ?Sized>(
    params: &ModelParams,
    records: &[PersonRecord],
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<bool>, ModelError> {
    let cum = CumulativeBaseline::new(params);
    records
        .iter()
        .map(|rec| match rec.smoking {
            Some(y) => Ok(y),
            None => {
                if rec.region.is_none() {
                    return Err(ModelError::MissingRegion(rec.id));
                }
                let odds =
                    imputation_log_odds(params, rec, &FollowUp::of(rec), &cum, mode.uses_survival());
                Ok(rng.random::<f64>() < inv_logit(odds))
            }
        })
        .collect()
}

/// Draws `h0[g][t]` from its truncated-Gamma full conditional given the
/// current aggregated follow-up and the neighbouring bins.
pub fn update_hazard_bin<R: Rng + ?Sized>(
    g: usize,
    bin: usize,
    params: &mut ModelParams,
    table: &RiskGroupTable,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<(), ModelError> {
    let mult = params.gamma[g].exp();
    let events = table.events(g, 0, bin) + table.events(g, 1, bin);
    let exposure = table.exposure(g, 0, bin) + mult * table.exposure(g, 1, bin);
    let h = &params.h0[g];
    let lower = if bin == 0 { 0.0 } else { h[bin - 1] };
    let upper = if bin + 1 == N_AGE_BINS {
        prior.hazard_upper
    } else {
        h[bin + 1].min(prior.hazard_upper)
    };
    let value = sample_truncated_gamma(events as f64 + 1.0, exposure, lower, upper, rng)?;
    params.h0[g][bin] = value;
    Ok(())
}

/// Weighted pool-adjacent-violators fit of a nondecreasing sequence.
pub(crate) fn isotonic_rates(events: &[f64], exposure: &[f64]) -> Vec<f64> {
    // blocks of (sum events, sum exposure, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
    for (&d, &e) in events.iter().zip(exposure) {
        blocks.push((d, e, 1));
        while blocks.len() > 1 {
            let n = blocks.len();
            let (d2, e2, _) = blocks[n - 1];
            let (d1, e1, _) = blocks[n - 2];
            // compare rates; empty blocks merge into their left neighbour
            let violates = e2 == 0.0 || (e1 > 0.0 && d1 / e1 > d2 / e2);
            if !violates {
                break;
            }
            let last = blocks.pop().unwrap();
            let prev = blocks.last_mut().unwrap();
            prev.0 += last.0;
            prev.1 += last.1;
            prev.2 += last.2;
        }
    }
    let mut out = Vec::with_capacity(events.len());
    for (d, e, len) in blocks {
        let rate = if e > 0.0 { d / e } else { 0.0 };
        out.extend(std::iter::repeat_n(rate, len));
    }
    out
}

/// Mutable state of one chain.
pub(super) struct ChainState<'a> {
    pub(super) data: &'a PreparedData,
    pub(super) params: ModelParams,
    pub(super) ys: Vec<bool>,
    pub(super) stats: SuffStats,
}

impl<'a> ChainState<'a> {
    pub(super) fn initial<R: Rng + ?Sized>(
        data: &'a PreparedData,
        prior: &PriorSpec,
        mode: Mode,
        rng: &mut R,
    ) -> Self {
        let mut params = ModelParams::zeros(0.0);
        for v in params.alpha0.iter_mut().flatten() {
            *v = rng.random_range(-0.5..0.5);
        }
        if !mode.fixed_eta() {
            for v in params.eta.iter_mut().flatten() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        for v in params.alpha1.iter_mut().flatten() {
            *v = rng.random_range(-0.02..0.02);
        }
        params.alpha2 = rng.random_range(-0.5..0.5);
        for v in params.beta0.iter_mut().flatten().flatten() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in params.beta1.iter_mut().flatten().flatten() {
            *v = rng.random_range(-0.02..0.02);
        }
        if mode.uses_survival() {
            for v in &mut params.gamma {
                *v = rng.random_range(-0.5..0.5);
            }
        }

        // missing smoking from the smoking model alone
        let mut ys: Vec<bool> = data.records.iter().map(|r| r.smoking.unwrap_or(false)).collect();
        for &i in &data.missing {
            let rec = &data.records[i];
            let p = crate::model::smoking_prob(
                &params,
                data.persons[i].g,
                data.persons[i].r,
                data.persons[i].s,
                f64::from(rec.year.year()),
                f64::from(rec.age),
            );
            ys[i] = rng.random::<f64>() < p;
        }
        let stats = SuffStats::build(data, &ys);

        // hazards at the crude monotone event rate, jittered per gender
        for g in 0..2 {
            let (d, e) = stats.pooled_rates(g);
            let factor = rng.random_range(0.8..1.25);
            let iso = isotonic_rates(&d, &e);
            let floor = 1e-6;
            let mut prev: f64 = 0.0;
            for (b, rate) in iso.into_iter().enumerate() {
                let v = (rate * factor).max(floor).max(prev).min(prior.hazard_upper);
                params.h0[g][b] = v;
                prev = v;
            }
        }
        ChainState {
            data,
            params,
            ys,
            stats,
        }
    }

    pub(super) fn impute<R: Rng + ?Sized>(&mut self, mode: Mode, rng: &mut R) {
        let cum = CumulativeBaseline::new(&self.params);
        let use_survival = mode.uses_survival();
        for &i in &self.data.missing {
            let person = &self.data.persons[i];
            let odds = imputation_log_odds(
                &self.params,
                &self.data.records[i],
                &person.follow,
                &cum,
                use_survival,
            );
            let y = rng.random::<f64>() < inv_logit(odds);
            if y != self.ys[i] {
                self.ys[i] = y;
                self.stats.flip(person, y);
            }
        }
    }

    /// `log P(T | y=1) - log P(T | y=0)` for every non-participant.
    pub(super) fn survival_log_ratios(&self, mode: Mode) -> Vec<f64> {
        let mut out = vec![0.0; self.data.records.len()];
        if !mode.uses_survival() {
            return out;
        }
        let cum = CumulativeBaseline::new(&self.params);
        for &i in &self.data.missing {
            let person = &self.data.persons[i];
            let g = person.g;
            let mut w = -(self.params.gamma[g].exp() - 1.0) * cum.over(g, &person.follow);
            if person.follow.event_bin.is_some() {
                w += self.params.gamma[g];
            }
            out[i] = w;
        }
        out
    }

    /// One Metropolis step per collapsed block. The imputation must follow
    /// before anything conditions on the smoking statuses again.
    #[allow(clippy::too_many_arguments)]
    pub(super) fn collapsed_sweep<R: Rng + ?Sized>(
        &mut self,
        blocks: &[BlockId],
        proposals: &mut [BlockProposal],
        ratios: &[f64],
        prior: &PriorSpec,
        mode: Mode,
        config: &SamplerConfig,
        rng: &mut R,
    ) {
        let fixed_eta = mode.fixed_eta();
        let (data, part_m) = (self.data, &self.stats.part_m);
        for (block, proposal) in blocks.iter().zip(proposals.iter_mut()) {
            let BlockId::Selection { gender, year } = *block else {
                continue;
            };
            metropolis_step(
                *block,
                &mut self.params,
                proposal,
                fixed_eta,
                config.target_acceptance,
                config.adapt_window as u64,
                rng,
                |p| collapsed_log_target(gender, year, p, data, part_m, ratios, prior, fixed_eta),
            );
        }
    }

    pub(super) fn update_hazards<R: Rng + ?Sized>(&mut self, prior: &PriorSpec, rng: &mut R) -> Result<(), ModelError> {
        for g in 0..2 {
            for bin in 0..N_AGE_BINS {
                update_hazard_bin(g, bin, &mut self.params, &self.stats.table, prior, rng)?;
            }
        }
        Ok(())
    }
}

/// Seeds chain `index` from the master seed. Each chain reads its own ChaCha
/// stream, so results do not depend on scheduling.
pub fn chain_rng(master_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Runs one chain of the data-augmentation sampler.
pub fn run_chain(
    config: &SamplerConfig,
    data: &PreparedData,
    prior: &PriorSpec,
    chain: usize,
) -> Result<ChainOutput, ModelError> {
    config.validate()?;
    prior.validate()?;
    let mut rng = chain_rng(config.seed, chain);
    let mode = config.mode;
    let fixed_eta = mode.fixed_eta();
    let mut state = ChainState::initial(data, prior, mode, &mut rng);

    let blocks = BlockId::all(mode.uses_survival());
    let new_proposal =
        |b: &BlockId| BlockProposal::new(b.dim(fixed_eta), b.initial_steps(&config.initial_steps));
    let mut proposals: Vec<BlockProposal> = blocks.iter().map(new_proposal).collect();
    let collapsed = BlockId::selection();
    let mut collapsed_proposals: Vec<BlockProposal> = collapsed.iter().map(new_proposal).collect();

    let total = config.burn_in + config.iterations;
    let mut draws = Vec::with_capacity(config.recorded_draws());
    let mut smokers = Vec::with_capacity(config.recorded_draws());
    let mut warnings = Vec::new();
    let window = config.adapt_window as u64;
    let started = Instant::now();

    for it in 0..total {
        if it == config.burn_in {
            proposals.iter_mut().chain(&mut collapsed_proposals).for_each(BlockProposal::freeze);
        } else if it == config.burn_in / 2 && it > 0 {
            proposals
                .iter_mut()
                .chain(&mut collapsed_proposals)
                .for_each(BlockProposal::restart_covariance);
        }
        let ratios = state.survival_log_ratios(mode);
        for _ in 0..config.block_sweeps {
            state.collapsed_sweep(&collapsed, &mut collapsed_proposals, &ratios, prior, mode, config, &mut rng);
        }
        state.impute(mode, &mut rng);
        for _ in 0..config.block_sweeps {
            for (block, proposal) in blocks.iter().zip(proposals.iter_mut()) {
                metropolis_update_block(
                    *block,
                    &mut state.params,
                    &state.stats,
                    prior,
                    proposal,
                    fixed_eta,
                    config.target_acceptance,
                    window,
                    &mut rng,
                );
            }
        }
        if mode.uses_survival() {
            state
                .update_hazards(prior, &mut rng)
                .map_err(|e| ModelError::Chain {
                    chain,
                    reason: e.to_string(),
                })?;
        }
        if it >= config.burn_in && (it + 1 - config.burn_in).is_multiple_of(config.thin) {
            if !hazard_is_admissible(&state.params.h0, prior.hazard_upper) {
                return Err(ModelError::Chain {
                    chain,
                    reason: format!("hazard constraint violated at iteration {it}"),
                });
            }
            draws.push(state.params.to_vec());
            smokers.push(state.stats.smokers);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();

    let acceptance: Vec<BlockAcceptance> = blocks
        .iter()
        .zip(&proposals)
        .chain(collapsed.iter().zip(&collapsed_proposals))
        .map(|(b, p)| BlockAcceptance {
            block: b.name(),
            rate: p.acceptance_rate(),
        })
        .collect();
    for a in &acceptance {
        if !(0.1..=0.6).contains(&a.rate) {
            warnings.push(format!(
                "chain {chain}: block {} acceptance {:.3} outside [0.1, 0.6]",
                a.block, a.rate
            ));
        }
    }
    Ok(ChainOutput {
        chain,
        draws,
        smokers,
        acceptance,
        seconds_per_iteration: elapsed / total.max(1) as f64,
        warnings,
    })
}

/// Runs `config.n_chains` independent chains on up to `workers` threads.
///
/// Output order and content are independent of `workers`.
pub fn run_parallel(
    config: &SamplerConfig,
    data: &PreparedData,
    prior: &PriorSpec,
    workers: Option<usize>,
) -> Result<Vec<ChainOutput>, ModelError> {
    config.validate()?;
    let threads = workers.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ModelError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<ChainOutput, ModelError>> = pool.install(|| {
        (0..config.n_chains)
            .into_par_iter()
            .map(|c| run_chain(config, data, prior, c))
            .collect()
    });
    results
        .into_iter()
        .enumerate()
        .map(|(chain, r)| {
            r.map_err(|e| match e {
                ModelError::Chain { .. } => e,
                other => ModelError::Chain {
                    chain,
                    reason: other.to_string(),
                },
            })
        })
        .collect()
}
