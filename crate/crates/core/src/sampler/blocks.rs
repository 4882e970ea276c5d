//! Random-walk Metropolis updates of coefficient blocks.
//!
//! Each block's log target only evaluates the likelihood cells that depend on
//! it, using the completed-data sufficient statistics.

use rand::{Rng, RngExt};
use rand_distr::StandardNormal;

use super::state::{part_slot, smk_slot, PreparedData, SuffStats, N_SURVEY_AGES};
use crate::data::{MIN_SURVEY_AGE, N_YEARS, STUDY_YEARS};
use crate::exposure::N_AGE_BINS;
use crate::model::{
    logistic_log_density, normal_log_density, softplus, ModelParams, PriorSpec, AGE_CENTRE,
    BIRTH_YEAR_CENTRE,
};

pub(crate) const MAX_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockId {
    /// `(alpha0[g][s], eta[g][s])`, or `alpha0` alone when `eta` is fixed.
    Participation { gender: usize, year: usize },
    /// The four age slopes and the region effect.
    AgeRegion,
    /// `(beta0[g][r][s], beta1[g][r][s])`.
    Smoking {
        gender: usize,
        region: usize,
        year: usize,
    },
    /// `(gamma1, gamma2)`.
    HazardRatio,
    /// `(alpha0[g][s], beta0[g][0][s], beta0[g][1][s], eta[g][s])` with the
    /// missing smoking statuses of the round summed out.
    Selection { gender: usize, year: usize },
}

impl BlockId {
    /// Every block in update order.
    pub fn all(with_survival: bool) -> Vec<BlockId> {
        let mut v = Vec::new();
        for gender in 0..2 {
            for year in 0..N_YEARS {
                v.push(BlockId::Participation { gender, year });
            }
        }
        v.push(BlockId::AgeRegion);
        for gender in 0..2 {
            for region in 0..2 {
                for year in 0..N_YEARS {
                    v.push(BlockId::Smoking {
                        gender,
                        region,
                        year,
                    });
                }
            }
        }
        if with_survival {
            v.push(BlockId::HazardRatio);
        }
        v
    }

    /// Collapsed blocks, one per (gender, year).
    pub fn selection() -> Vec<BlockId> {
        (0..2)
            .flat_map(|gender| (0..N_YEARS).map(move |year| BlockId::Selection { gender, year }))
            .collect()
    }

    pub fn name(&self) -> String {
        match *self {
            BlockId::Participation { gender, year } => {
                format!("participation_g{gender}_s{}", STUDY_YEARS[year])
            }
            BlockId::AgeRegion => "age_region".into(),
            BlockId::Smoking {
                gender,
                region,
                year,
            } => format!("smoking_g{gender}_r{region}_s{}", STUDY_YEARS[year]),
            BlockId::HazardRatio => "hazard_ratio".into(),
            BlockId::Selection { gender, year } => {
                format!("selection_g{gender}_s{}", STUDY_YEARS[year])
            }
        }
    }

    pub fn dim(&self, fixed_eta: bool) -> usize {
        match self {
            BlockId::Participation { .. } if fixed_eta => 1,
            BlockId::AgeRegion => 5,
            BlockId::Selection { .. } if fixed_eta => 3,
            BlockId::Selection { .. } => 4,
            _ => 2,
        }
    }

    pub(crate) fn get(&self, p: &ModelParams, fixed_eta: bool) -> [f64; MAX_DIM] {
        let mut v = [0.0; MAX_DIM];
        match *self {
            BlockId::Participation { gender, year } => {
                v[0] = p.alpha0[gender][year];
                if !fixed_eta {
                    v[1] = p.eta[gender][year];
                }
            }
            BlockId::AgeRegion => {
                v[0] = p.alpha1[0][0];
                v[1] = p.alpha1[0][1];
                v[2] = p.alpha1[1][0];
                v[3] = p.alpha1[1][1];
                v[4] = p.alpha2;
            }
            BlockId::Smoking {
                gender,
                region,
                year,
            } => {
                v[0] = p.beta0[gender][region][year];
                v[1] = p.beta1[gender][region][year];
            }
            BlockId::HazardRatio => {
                v[0] = p.gamma[0];
                v[1] = p.gamma[1];
            }
            BlockId::Selection { gender, year } => {
                v[0] = p.alpha0[gender][year];
                v[1] = p.beta0[gender][0][year];
                v[2] = p.beta0[gender][1][year];
                if !fixed_eta {
                    v[3] = p.eta[gender][year];
                }
            }
        }
        v
    }

    pub(crate) fn set(&self, p: &mut ModelParams, v: &[f64; MAX_DIM], fixed_eta: bool) {
        match *self {
            BlockId::Participation { gender, year } => {
                p.alpha0[gender][year] = v[0];
                if !fixed_eta {
                    p.eta[gender][year] = v[1];
                }
            }
            BlockId::AgeRegion => {
                p.alpha1[0][0] = v[0];
                p.alpha1[0][1] = v[1];
                p.alpha1[1][0] = v[2];
                p.alpha1[1][1] = v[3];
                p.alpha2 = v[4];
            }
            BlockId::Smoking {
                gender,
                region,
                year,
            } => {
                p.beta0[gender][region][year] = v[0];
                p.beta1[gender][region][year] = v[1];
            }
            BlockId::HazardRatio => {
                p.gamma[0] = v[0];
                p.gamma[1] = v[1];
            }
            BlockId::Selection { gender, year } => {
                p.alpha0[gender][year] = v[0];
                p.beta0[gender][0][year] = v[1];
                p.beta0[gender][1][year] = v[2];
                if !fixed_eta {
                    p.eta[gender][year] = v[3];
                }
            }
        }
    }

    /// Default initial random-walk step per coordinate.
    pub(crate) fn initial_steps(&self, steps: &StepSizes) -> [f64; MAX_DIM] {
        match self {
            BlockId::Participation { .. } => [steps.intercept, steps.intercept, 0.0, 0.0, 0.0],
            BlockId::AgeRegion => [steps.slope, steps.slope, steps.slope, steps.slope, steps.intercept],
            BlockId::Smoking { .. } => [steps.intercept, steps.slope, 0.0, 0.0, 0.0],
            BlockId::HazardRatio => [steps.intercept, steps.intercept, 0.0, 0.0, 0.0],
            BlockId::Selection { .. } => [steps.intercept; MAX_DIM],
        }
    }
}

/// Initial proposal standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepSizes {
    /// Intercept-like coefficients (alpha0, eta, alpha2, beta0, gamma).
    pub intercept: f64,
    /// Slopes on age or birth year (alpha1, beta1).
    pub slope: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        StepSizes {
            intercept: 0.1,
            slope: 0.005,
        }
    }
}

/// Participation log-likelihood over the cells of one (gender, year).
fn participation_cells(p: &ModelParams, st: &SuffStats, g: usize, s: usize) -> f64 {
    let mut ll = 0.0;
    for r in 0..2 {
        for y in 0..2 {
            let base = p.alpha0[g][s] + p.eta[g][s] * y as f64 + p.alpha2 * r as f64;
            let slope = p.alpha1[g][y];
            let start = part_slot(g, s, r, y, 0);
            for a in 0..N_SURVEY_AGES {
                let n = st.part_n[start + a];
                if n == 0 {
                    continue;
                }
                let m = st.part_m[start + a];
                let lin = base + slope * ((a as u32 + MIN_SURVEY_AGE) as f64 - AGE_CENTRE);
                ll += f64::from(m) * lin - f64::from(n) * softplus(lin);
            }
        }
    }
    ll
}

fn smoking_cells(p: &ModelParams, st: &SuffStats, g: usize, r: usize, s: usize) -> f64 {
    let b0 = p.beta0[g][r][s];
    let b1 = p.beta1[g][r][s];
    let year = f64::from(STUDY_YEARS[s]);
    let start = smk_slot(g, r, s, 0);
    let mut ll = 0.0;
    for a in 0..N_SURVEY_AGES {
        let n = st.smk_n[start + a];
        if n == 0 {
            continue;
        }
        let k = st.smk_k[start + a];
        let birth = year - (a as u32 + MIN_SURVEY_AGE) as f64 - BIRTH_YEAR_CENTRE;
        let lin = b0 + birth * b1;
        ll += f64::from(k) * lin - f64::from(n) * softplus(lin);
    }
    ll
}

/// Terms of the survival log-likelihood that depend on `gamma`.
fn survival_smoker_cells(p: &ModelParams, st: &SuffStats) -> f64 {
    let mut ll = 0.0;
    for g in 0..2 {
        let mult = p.gamma[g].exp();
        let mut events = 0u64;
        let mut expected = 0.0;
        for b in 0..N_AGE_BINS {
            events += st.table.events(g, 1, b);
            expected += p.h0[g][b] * st.table.exposure(g, 1, b);
        }
        ll += events as f64 * p.gamma[g] - mult * expected;
    }
    ll
}

/// Log posterior up to terms that do not involve the block.
pub(crate) fn block_log_target(
    id: BlockId,
    p: &ModelParams,
    st: &SuffStats,
    prior: &PriorSpec,
    fixed_eta: bool,
) -> f64 {
    let var = prior.coef_variance;
    match id {
        BlockId::Participation { gender, year } => {
            let mut lp = participation_cells(p, st, gender, year)
                + normal_log_density(p.alpha0[gender][year], var);
            if !fixed_eta {
                lp += logistic_log_density(p.eta[gender][year], 0.0, prior.eta_scale);
            }
            lp
        }
        BlockId::AgeRegion => {
            let mut lp = 0.0;
            for g in 0..2 {
                for s in 0..N_YEARS {
                    lp += participation_cells(p, st, g, s);
                }
            }
            lp + p
                .alpha1
                .iter()
                .flatten()
                .chain(std::iter::once(&p.alpha2))
                .map(|&x| normal_log_density(x, var))
                .sum::<f64>()
        }
        BlockId::Smoking {
            gender,
            region,
            year,
        } => {
            smoking_cells(p, st, gender, region, year)
                + normal_log_density(p.beta0[gender][region][year], var)
                + normal_log_density(p.beta1[gender][region][year], var)
        }
        BlockId::HazardRatio => {
            survival_smoker_cells(p, st)
                + normal_log_density(p.gamma[0], var)
                + normal_log_density(p.gamma[1], var)
        }
        BlockId::Selection { gender, year } => {
            let mut lp = block_log_target(BlockId::Participation { gender, year }, p, st, prior, fixed_eta);
            for region in 0..2 {
                lp += smoking_cells(p, st, gender, region, year)
                    + normal_log_density(p.beta0[gender][region][year], var);
            }
            lp
        }
    }
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log posterior of a [`BlockId::Selection`] block with every missing
/// smoking status of the round summed out, up to terms free of the block.
///
/// `survival_log_ratio[i]` is `log P(T_i | y=1) - log P(T_i | y=0)` for each
/// non-participant `i` (zero when follow-up is not modelled).
#[allow(clippy::too_many_arguments)]
pub(crate) fn collapsed_log_target(
    gender: usize,
    year: usize,
    p: &ModelParams,
    data: &PreparedData,
    part_m: &[u32],
    survival_log_ratio: &[f64],
    prior: &PriorSpec,
    fixed_eta: bool,
) -> f64 {
    let (g, s) = (gender, year);
    let var = prior.coef_variance;
    let mut lp = normal_log_density(p.alpha0[g][s], var);
    if !fixed_eta {
        lp += logistic_log_density(p.eta[g][s], 0.0, prior.eta_scale);
    }
    let survey_year = f64::from(STUDY_YEARS[s]);
    // per (region, age): log P(M=0, Y=y) for a non-participant
    let mut miss = [[[0.0; 2]; N_SURVEY_AGES]; 2];
    for r in 0..2 {
        lp += normal_log_density(p.beta0[g][r][s], var);
        let base = p.alpha0[g][s] + p.alpha2 * r as f64;
        for a in 0..N_SURVEY_AGES {
            let age = (a as u32 + MIN_SURVEY_AGE) as f64;
            let lin0 = base + p.alpha1[g][0] * (age - AGE_CENTRE);
            let lin1 = base + p.eta[g][s] + p.alpha1[g][1] * (age - AGE_CENTRE);
            let ql = p.beta0[g][r][s] + (survey_year - age - BIRTH_YEAR_CENTRE) * p.beta1[g][r][s];
            let m0 = part_m[part_slot(g, s, r, 0, a)];
            let m1 = part_m[part_slot(g, s, r, 1, a)];
            lp -= f64::from(m0) * softplus(-lin0) + f64::from(m1) * softplus(-lin1);
            let slot = smk_slot(g, r, s, a);
            let (n, k) = (data.obs_smk_n[slot], data.obs_smk_k[slot]);
            lp -= f64::from(k) * softplus(-ql) + f64::from(n - k) * softplus(ql);
            miss[r][a] = [-softplus(lin0) - softplus(ql), -softplus(lin1) - softplus(-ql)];
        }
    }
    for &i in &data.missing_by_round[g * N_YEARS + s] {
        let person = &data.persons[i];
        let [l0, l1] = miss[person.r][person.age_idx];
        lp += log_add_exp(l1 + survival_log_ratio[i], l0);
    }
    lp
}

/// Adaptive multivariate random-walk proposal for one block.
///
/// During burn-in the global scale follows a Robbins-Monro recursion toward
/// the target acceptance rate and the shape tracks the empirical covariance
/// of the block. After [`BlockProposal::freeze`] the kernel is fixed.
#[derive(Debug, Clone)]
pub struct BlockProposal {
    dim: usize,
    log_scale: f64,
    chol: [[f64; MAX_DIM]; MAX_DIM],
    mean: [f64; MAX_DIM],
    scatter: [[f64; MAX_DIM]; MAX_DIM],
    seen: u64,
    cov_n: u64,
    shaped: bool,
    adapting: bool,
    pub(crate) proposed: u64,
    pub(crate) accepted: u64,
}

impl BlockProposal {
    pub fn new(dim: usize, steps: [f64; MAX_DIM]) -> Self {
        let mut chol = [[0.0; MAX_DIM]; MAX_DIM];
        for (i, row) in chol.iter_mut().enumerate().take(dim) {
            row[i] = steps[i];
        }
        BlockProposal {
            dim,
            log_scale: 0.0,
            chol,
            mean: [0.0; MAX_DIM],
            scatter: [[0.0; MAX_DIM]; MAX_DIM],
            seen: 0,
            cov_n: 0,
            shaped: false,
            adapting: true,
            proposed: 0,
            accepted: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn is_adapting(&self) -> bool {
        self.adapting
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn propose<R: Rng + ?Sized>(&self, current: &[f64; MAX_DIM], rng: &mut R) -> [f64; MAX_DIM] {
        let mut z = [0.0; MAX_DIM];
        for zi in z.iter_mut().take(self.dim) {
            *zi = rng.sample(StandardNormal);
        }
        let scale = self.scale();
        let mut out = *current;
        for (i, o) in out.iter_mut().enumerate().take(self.dim) {
            let step: f64 = self.chol[i][..=i].iter().zip(&z).map(|(c, zj)| c * zj).sum();
            *o += scale * step;
        }
        out
    }

    /// Robbins-Monro step on the log scale plus a running covariance update.
    fn adapt(&mut self, accept_prob: f64, target: f64, value: &[f64; MAX_DIM], window: u64) {
        if !self.adapting {
            return;
        }
        self.seen += 1;
        let n = self.seen as f64;
        let gain = (1.0 + n / window as f64).powf(-0.6);
        self.log_scale = (self.log_scale + gain * (accept_prob - target)).clamp(-12.0, 6.0);
        self.cov_n += 1;
        let m = self.cov_n as f64;
        let mut delta = [0.0; MAX_DIM];
        for ((d, v), mu) in delta.iter_mut().zip(value).zip(&mut self.mean).take(self.dim) {
            *d = v - *mu;
            *mu += *d / m;
        }
        for (i, row) in self.scatter.iter_mut().enumerate().take(self.dim) {
            for (j, s) in row.iter_mut().enumerate().take(i + 1) {
                *s += delta[i] * (value[j] - self.mean[j]);
            }
        }
        if self.seen.is_multiple_of(window) && self.cov_n >= 2 * window {
            self.refresh_shape();
        }
    }

    fn refresh_shape(&mut self) {
        let d = self.dim;
        let n = self.cov_n as f64;
        let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                let c = self.scatter[i][j] / (n - 1.0);
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        // keep the shape positive definite
        for i in 0..d {
            cov[(i, i)] += 1e-10 + 1e-6 * cov[(i, i)];
        }
        let target = 2.38 * 2.38 / d as f64;
        if let Some(ch) = nalgebra::Cholesky::new(cov * target) {
            let l = ch.l();
            for i in 0..d {
                for j in 0..=i {
                    self.chol[i][j] = l[(i, j)];
                }
            }
            if !self.shaped {
                // the scale was tuned for the initial diagonal steps
                self.log_scale = 0.0;
                self.shaped = true;
            }
        }
    }

    /// Forgets the covariance accumulated so far (e.g. the initial transient).
    pub fn restart_covariance(&mut self) {
        self.cov_n = 0;
        self.mean = [0.0; MAX_DIM];
        self.scatter = [[0.0; MAX_DIM]; MAX_DIM];
    }

    /// Stops adaptation; later updates use a fixed kernel.
    pub fn freeze(&mut self) {
        self.adapting = false;
        self.proposed = 0;
        self.accepted = 0;
    }
}

/// One Metropolis step on `id`. Returns whether the proposal was accepted.
#[allow(clippy::too_many_arguments)]
pub fn metropolis_update_block<R: Rng + ?Sized>(
    id: BlockId,
    params: &mut ModelParams,
    stats: &SuffStats,
    prior: &PriorSpec,
    proposal: &mut BlockProposal,
    fixed_eta: bool,
    target_acceptance: f64,
    adapt_window: u64,
    rng: &mut R,
) -> bool {
    metropolis_step(id, params, proposal, fixed_eta, target_acceptance, adapt_window, rng, |p| {
        block_log_target(id, p, stats, prior, fixed_eta)
    })
}

/// Random-walk Metropolis step on the block `id` of `params` for an
/// arbitrary block log target.
#[allow(clippy::too_many_arguments)]
pub(crate) fn metropolis_step<R: Rng + ?Sized>(
    id: BlockId,
    params: &mut ModelParams,
    proposal: &mut BlockProposal,
    fixed_eta: bool,
    target_acceptance: f64,
    adapt_window: u64,
    rng: &mut R,
    log_target: impl Fn(&ModelParams) -> f64,
) -> bool {
    let current = id.get(params, fixed_eta);
    let current_lp = log_target(params);
    let candidate = proposal.propose(&current, rng);
    id.set(params, &candidate, fixed_eta);
    let candidate_lp = log_target(params);
    let log_ratio = candidate_lp - current_lp;
    let accept_prob = if log_ratio.is_nan() {
        0.0
    } else {
        log_ratio.min(0.0).exp()
    };
    let accepted = candidate_lp.is_finite() && rng.random::<f64>() < accept_prob;
    if !accepted {
        id.set(params, &current, fixed_eta);
    }
    proposal.proposed += 1;
    proposal.accepted += u64::from(accepted);
    let value = if accepted { candidate } else { current };
    proposal.adapt(accept_prob, target_acceptance, &value, adapt_window);
    accepted
}
