//! Likelihood terms and prior densities of the joint selection model.
//!
//! Three submodels share the smoking indicator `y`:
//!
//! ```text
//! participation  logit P(M=1 | x, y) = alpha0[g,s] + eta[g,s] y + alpha1[g,y] (a - 45) + alpha2 r
//! smoking        logit P(Y=1 | x)    = beta0[g,r,s] + (s - a - 1938) beta1[g,r,s]
//! follow-up      dN(t) ~ Poisson(exp(gamma_g y) h0[g,t])   for t = 25..=100
//! ```

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PersonRecord, N_YEARS};
use crate::error::ModelError;
use crate::exposure::{FollowUp, RiskGroupTable, FIRST_AGE, LAST_AGE, N_AGE_BINS};

/// Age centring constant of the participation model.
pub const AGE_CENTRE: f64 = 45.0;
/// Birth-year centring constant of the smoking model.
pub const BIRTH_YEAR_CENTRE: f64 = 1938.0;

pub const N_COEFFICIENTS: usize = 16 + 16 + 4 + 1 + 32 + 32 + 2;
pub const N_PARAMS: usize = N_COEFFICIENTS + 2 * N_AGE_BINS;

/// Log-density value with an explicit flag for points outside the support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogDensity {
    Value(f64),
    Rejected,
}

impl LogDensity {
    pub fn value(self) -> f64 {
        match self {
            LogDensity::Value(v) => v,
            LogDensity::Rejected => f64::NEG_INFINITY,
        }
    }

    pub fn is_rejected(self) -> bool {
        matches!(self, LogDensity::Rejected)
    }
}

/// Every coefficient of the three submodels plus the baseline hazards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Participation intercepts, `[gender][year]`.
    pub alpha0: [[f64; N_YEARS]; 2],
    /// Effect of smoking on participation, `[gender][year]`.
    pub eta: [[f64; N_YEARS]; 2],
    /// Age slope of participation, `[gender][smoking]`.
    pub alpha1: [[f64; 2]; 2],
    pub alpha2: f64,
    /// Smoking intercepts, `[gender][region][year]`.
    pub beta0: [[[f64; N_YEARS]; 2]; 2],
    /// Birth-year slopes, `[gender][region][year]`.
    pub beta1: [[[f64; N_YEARS]; 2]; 2],
    /// Log hazard ratio of smoking, `[men, women]`.
    pub gamma: [f64; 2],
    /// Baseline hazard per gender for ages 25..=100.
    pub h0: [Vec<f64>; 2],
}

impl ModelParams {
    /// All coefficients zero, flat baseline hazard.
    pub fn zeros(baseline: f64) -> Self {
        ModelParams {
            alpha0: [[0.0; N_YEARS]; 2],
            eta: [[0.0; N_YEARS]; 2],
            alpha1: [[0.0; 2]; 2],
            alpha2: 0.0,
            beta0: [[[0.0; N_YEARS]; 2]; 2],
            beta1: [[[0.0; N_YEARS]; 2]; 2],
            gamma: [0.0; 2],
            h0: [vec![baseline; N_AGE_BINS], vec![baseline; N_AGE_BINS]],
        }
    }

    /// Checks shapes, finiteness and the monotone hazard constraint.
    pub fn validate(&self, hazard_upper: f64) -> Result<(), ModelError> {
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err(ModelError::Config("non-finite parameter".into()));
        }
        for h in &self.h0 {
            if h.len() != N_AGE_BINS {
                return Err(ModelError::Config(format!(
                    "baseline hazard needs {N_AGE_BINS} values, found {}",
                    h.len()
                )));
            }
        }
        if !hazard_is_admissible(&self.h0, hazard_upper) {
            return Err(ModelError::Config(
                "baseline hazard must be nondecreasing within [0, upper]".into(),
            ));
        }
        Ok(())
    }

    /// Flattens parameters in [`parameter_names`] order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(N_PARAMS);
        v.extend(self.alpha0.iter().flatten());
        v.extend(self.eta.iter().flatten());
        v.extend(self.alpha1.iter().flatten());
        v.push(self.alpha2);
        v.extend(self.beta0.iter().flatten().flatten());
        v.extend(self.beta1.iter().flatten().flatten());
        v.extend(self.gamma);
        v.extend(self.h0.iter().flatten());
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, ModelError> {
        if v.len() != N_PARAMS {
            return Err(ModelError::Config(format!(
                "expected {N_PARAMS} parameter values, found {}",
                v.len()
            )));
        }
        let mut it = v.iter().copied();
        let mut p = ModelParams::zeros(0.0);
        for x in p.alpha0.iter_mut().flatten() {
            *x = it.next().unwrap();
        }
        for x in p.eta.iter_mut().flatten() {
            *x = it.next().unwrap();
        }
        for x in p.alpha1.iter_mut().flatten() {
            *x = it.next().unwrap();
        }
        p.alpha2 = it.next().unwrap();
        for x in p.beta0.iter_mut().flatten().flatten() {
            *x = it.next().unwrap();
        }
        for x in p.beta1.iter_mut().flatten().flatten() {
            *x = it.next().unwrap();
        }
        for x in &mut p.gamma {
            *x = it.next().unwrap();
        }
        for x in p.h0.iter_mut().flatten() {
            *x = it.next().unwrap();
        }
        Ok(p)
    }
}

/// Column names matching [`ModelParams::to_vec`].
pub fn parameter_names() -> Vec<String> {
    use crate::data::STUDY_YEARS;
    let mut names = Vec::with_capacity(N_PARAMS);
    for prefix in ["alpha0", "eta"] {
        for g in 0..2 {
            for s in STUDY_YEARS {
                names.push(format!("{prefix}_g{g}_s{s}"));
            }
        }
    }
    for g in 0..2 {
        for y in 0..2 {
            names.push(format!("alpha1_g{g}_y{y}"));
        }
    }
    names.push("alpha2".into());
    for prefix in ["beta0", "beta1"] {
        for g in 0..2 {
            for r in 0..2 {
                for s in STUDY_YEARS {
                    names.push(format!("{prefix}_g{g}_r{r}_s{s}"));
                }
            }
        }
    }
    names.push("gamma1".into());
    names.push("gamma2".into());
    for g in 0..2 {
        for t in FIRST_AGE..=LAST_AGE {
            names.push(format!("h0_g{g}_t{t}"));
        }
    }
    names
}

/// Prior hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Scale of the zero-mean logistic prior on each `eta`.
    pub eta_scale: f64,
    /// Variance of the zero-mean normal priors on the other coefficients.
    pub coef_variance: f64,
    /// Upper bound of the baseline hazard.
    pub hazard_upper: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            eta_scale: 1.0 / 2.05,
            coef_variance: 1000.0,
            hazard_upper: 20.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = [self.eta_scale, self.coef_variance, self.hazard_upper]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config("prior hyperparameters must be positive".into()))
        }
    }
}

#[inline]
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Log-density of Logistic(mu, s).
pub fn logistic_log_density(x: f64, mu: f64, s: f64) -> f64 {
    let z = (x - mu) / s;
    // symmetric in z; use the decaying branch
    let z = z.abs();
    -z - s.ln() - 2.0 * (-z).exp().ln_1p()
}

pub fn normal_log_density(x: f64, variance: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - 0.5 * x * x / variance
}

/// Summary of `p = invlogit(logit(base) + eta)` under the `eta` prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushForward {
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Monte-Carlo push-forward of the Logistic(0, `eta_scale`) prior onto the
/// probability scale around a baseline probability.
pub fn prior_pushforward(eta_scale: f64, base: f64, n: usize, seed: u64) -> PushForward {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = logit(base);
    let mut ps: Vec<f64> = (0..n)
        .map(|_| {
            // inverse CDF; open interval keeps logit finite
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            inv_logit(shift + eta_scale * logit(u))
        })
        .collect();
    let mean = ps.iter().sum::<f64>() / n as f64;
    ps.sort_by(f64::total_cmp);
    let q = |p: f64| ps[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
    PushForward {
        mean,
        q025: q(0.025),
        q975: q(0.975),
    }
}

/// Linear predictor of the participation model.
#[inline]
pub fn participation_logit(p: &ModelParams, g: usize, s: usize, age: f64, r: usize, y: usize) -> f64 {
    p.alpha0[g][s]
        + p.eta[g][s] * y as f64
        + p.alpha1[g][y] * (age - AGE_CENTRE)
        + p.alpha2 * r as f64
}

pub fn participation_prob(p: &ModelParams, g: usize, s: usize, age: f64, r: usize, y: usize) -> f64 {
    inv_logit(participation_logit(p, g, s, age, r, y))
}

/// Birth year relative to the centring constant, for survey year `year`.
#[inline]
pub fn centred_birth_year(year: f64, age: f64) -> f64 {
    year - age - BIRTH_YEAR_CENTRE
}

/// Linear predictor of the smoking model; `year` is the calendar year.
#[inline]
pub fn smoking_logit(p: &ModelParams, g: usize, r: usize, s: usize, year: f64, age: f64) -> f64 {
    p.beta0[g][r][s] + centred_birth_year(year, age) * p.beta1[g][r][s]
}

pub fn smoking_prob(p: &ModelParams, g: usize, r: usize, s: usize, year: f64, age: f64) -> f64 {
    inv_logit(smoking_logit(p, g, r, s, year, age))
}

/// Hazard multiplier `exp(gamma_g y)`.
#[inline]
pub fn smoking_multiplier(p: &ModelParams, g: usize, y: usize) -> f64 {
    if y == 0 {
        1.0
    } else {
        p.gamma[g].exp()
    }
}

/// Hazard `exp(gamma_g y) h0[g][t]` at integer age `t`.
pub fn hazard(p: &ModelParams, g: usize, y: usize, t: i64) -> Result<f64, ModelError> {
    if t < i64::from(FIRST_AGE) || t > i64::from(LAST_AGE) {
        return Err(ModelError::AgeOutOfGrid(t));
    }
    Ok(hazard_at_bin(p, g, y, (t - i64::from(FIRST_AGE)) as usize))
}

#[inline]
pub(crate) fn hazard_at_bin(p: &ModelParams, g: usize, y: usize, bin: usize) -> f64 {
    smoking_multiplier(p, g, y) * p.h0[g][bin]
}

fn ln_factorial(n: u64) -> f64 {
    statrs::function::factorial::ln_factorial(n)
}

/// Poisson log-likelihood of the aggregated follow-up.
pub fn loglik_survival(p: &ModelParams, table: &RiskGroupTable) -> Result<f64, ModelError> {
    let mut ll = 0.0;
    for g in 0..2 {
        for y in 0..2 {
            for bin in 0..N_AGE_BINS {
                ll += survival_cell_loglik(p, table, g, y, bin)?;
            }
        }
    }
    Ok(ll)
}

/// One cell's Poisson log-pmf, `D log(lambda E) - lambda E - log D!`.
pub(crate) fn survival_cell_loglik(
    p: &ModelParams,
    table: &RiskGroupTable,
    g: usize,
    y: usize,
    bin: usize,
) -> Result<f64, ModelError> {
    let d = table.events(g, y, bin);
    let e = table.exposure(g, y, bin);
    if e == 0.0 {
        if d > 0 {
            return Err(ModelError::ImpossibleExposure {
                gender: g,
                smoking: y,
                age: i64::from(FIRST_AGE) + bin as i64,
                events: d,
            });
        }
        return Ok(0.0);
    }
    let mean = hazard_at_bin(p, g, y, bin) * e;
    if d == 0 {
        return Ok(-mean);
    }
    Ok(d as f64 * mean.ln() - mean - ln_factorial(d))
}

/// Returns true when every baseline hazard curve is nondecreasing in `[0, upper]`.
pub fn hazard_is_admissible(h0: &[Vec<f64>; 2], upper: f64) -> bool {
    h0.iter().all(|h| {
        h.first().is_some_and(|&x| x >= 0.0)
            && h.windows(2).all(|w| w[0] <= w[1])
            && h.last().is_some_and(|&x| x <= upper)
    })
}

/// Joint log prior density.
///
/// Logistic on each `eta`, normal on every other coefficient and zero on
/// the admissible monotone hazard region.
pub fn logprior(p: &ModelParams, prior: &PriorSpec) -> LogDensity {
    if !hazard_is_admissible(&p.h0, prior.hazard_upper) {
        return LogDensity::Rejected;
    }
    let eta: f64 = p
        .eta
        .iter()
        .flatten()
        .map(|&x| logistic_log_density(x, 0.0, prior.eta_scale))
        .sum();
    let normals: f64 = p
        .alpha0
        .iter()
        .flatten()
        .chain(p.alpha1.iter().flatten())
        .chain(std::iter::once(&p.alpha2))
        .chain(p.beta0.iter().flatten().flatten())
        .chain(p.beta1.iter().flatten().flatten())
        .chain(p.gamma.iter())
        .map(|&x| normal_log_density(x, prior.coef_variance))
        .sum();
    LogDensity::Value(eta + normals)
}

/// Bernoulli log-likelihood of participation for completed smoking.
pub fn loglik_participation(p: &ModelParams, records: &[PersonRecord], ys: &[bool]) -> f64 {
    records
        .iter()
        .zip(ys)
        .map(|(rec, &y)| {
            let eta = participation_logit(
                p,
                rec.gender.index(),
                rec.year.index(),
                f64::from(rec.age),
                rec.region.map_or(0, |r| r.index()),
                usize::from(y),
            );
            if rec.participated {
                -softplus(-eta)
            } else {
                -softplus(eta)
            }
        })
        .sum()
}

/// Bernoulli log-likelihood of completed smoking given background variables.
pub fn loglik_smoking(p: &ModelParams, records: &[PersonRecord], ys: &[bool]) -> f64 {
    records
        .iter()
        .zip(ys)
        .map(|(rec, &y)| {
            let lin = smoking_logit(
                p,
                rec.gender.index(),
                rec.region.map_or(0, |r| r.index()),
                rec.year.index(),
                f64::from(rec.year.year()),
                f64::from(rec.age),
            );
            if y {
                -softplus(-lin)
            } else {
                -softplus(lin)
            }
        })
        .sum()
}

/// Cumulative baseline hazard per gender, `cum[g][k] = sum of h0[g][..k]`.
#[derive(Debug, Clone)]
pub struct CumulativeBaseline {
    cum: [Vec<f64>; 2],
}

impl CumulativeBaseline {
    pub fn new(p: &ModelParams) -> Self {
        let build = |g: usize| {
            let mut c = Vec::with_capacity(N_AGE_BINS + 1);
            c.push(0.0);
            let mut acc = 0.0;
            for bin in 0..N_AGE_BINS {
                acc += hazard_at_bin(p, g, 0, bin);
                c.push(acc);
            }
            c
        };
        CumulativeBaseline {
            cum: [build(0), build(1)],
        }
    }

    /// Baseline cumulative hazard over `[follow.entry, follow.exit)`.
    #[inline]
    pub fn over(&self, g: usize, follow: &FollowUp) -> f64 {
        self.cum[g][follow.exit] - self.cum[g][follow.entry]
    }
}

/// Person-level Poisson log-likelihood of follow-up under smoking status `y`.
pub fn person_survival_loglik(
    p: &ModelParams,
    g: usize,
    y: usize,
    follow: &FollowUp,
    cumulative: &CumulativeBaseline,
) -> f64 {
    let mult = smoking_multiplier(p, g, y);
    let mut ll = -mult * cumulative.over(g, follow);
    if let Some(bin) = follow.event_bin {
        ll += hazard_at_bin(p, g, y, bin).ln();
    }
    ll
}

/// Log odds of `Y = 1` for a non-participant given everything else.
///
/// With `use_survival = false` the follow-up factor is dropped, which is the
/// missing-at-random variant of the imputation step.
pub(crate) fn imputation_log_odds(
    p: &ModelParams,
    rec: &PersonRecord,
    follow: &FollowUp,
    cumulative: &CumulativeBaseline,
    use_survival: bool,
) -> f64 {
    let g = rec.gender.index();
    let s = rec.year.index();
    let r = rec.region.map_or(0, |r| r.index());
    let age = f64::from(rec.age);
    let prior_odds = smoking_logit(p, g, r, s, f64::from(rec.year.year()), age);
    // log P(M=0 | y) = -softplus(logit)
    let selection = softplus(participation_logit(p, g, s, age, r, 0))
        - softplus(participation_logit(p, g, s, age, r, 1));
    let mut odds = prior_odds + selection;
    if use_survival {
        // the baseline hazard cancels in the ratio of the two interval likelihoods
        let gamma = p.gamma[g];
        if follow.event_bin.is_some() {
            odds += gamma;
        }
        odds -= (smoking_multiplier(p, g, 1) - 1.0) * cumulative.over(g, follow);
    }
    odds
}

/// Probability that a non-participant smokes given background variables,
/// non-participation and their own follow-up.
pub fn full_conditional_smoking(
    p: &ModelParams,
    rec: &PersonRecord,
    follow: &FollowUp,
    cumulative: &CumulativeBaseline,
) -> Result<f64, ModelError> {
    if rec.participated {
        return Err(ModelError::Participant(rec.id));
    }
    if rec.region.is_none() {
        return Err(ModelError::MissingRegion(rec.id));
    }
    Ok(inv_logit(imputation_log_odds(p, rec, follow, cumulative, true)))
}
