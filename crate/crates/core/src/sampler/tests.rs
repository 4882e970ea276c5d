use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::blocks::{
    block_log_target, collapsed_log_target, metropolis_update_block, BlockId, BlockProposal, MAX_DIM,
};
use super::chain::{gibbs_impute_missing, update_hazard_bin, ChainState, Mode};
use super::state::{PreparedData, SuffStats};
use crate::data::{Gender, PersonRecord, Region, StudyYear};
use crate::exposure::{aggregate_risk_groups, FollowUp, RiskGroupTable, FIRST_AGE};
use crate::model::{
    inv_logit, logprior, loglik_participation, person_survival_loglik, CumulativeBaseline, loglik_smoking, loglik_survival, ModelParams,
    PriorSpec,
};
use crate::simulate::{scenario_from_paper_shape, simulate_dataset};

fn record(id: u64, age: u32, participated: bool, smoking: Option<bool>, event_at: Option<u32>) -> PersonRecord {
    let t_cens = age + 40;
    PersonRecord {
        id,
        gender: Gender::Men,
        region: Some(Region::NorthKarelia),
        year: StudyYear::from_year(1972).unwrap(),
        age,
        participated,
        smoking,
        event: event_at.is_some(),
        t_obs: event_at.unwrap_or(t_cens),
        t_cens,
    }
}

fn full_log_posterior(p: &ModelParams, records: &[PersonRecord], ys: &[bool], prior: &PriorSpec) -> f64 {
    let assignment: Vec<Option<bool>> = ys.iter().map(|&y| Some(y)).collect();
    let table = aggregate_risk_groups(records, &assignment).unwrap();
    loglik_participation(p, records, ys)
        + loglik_smoking(p, records, ys)
        + loglik_survival(p, &table).unwrap()
        + logprior(p, prior).value()
}

#[test]
fn block_targets_match_full_posterior_differences() {
    let c = scenario_from_paper_shape(0.01, 3).unwrap();
    let sim = simulate_dataset(&c).unwrap();
    let records = sim.records.clone();
    let data = PreparedData::new(records.clone()).unwrap();
    let ys = sim.latent_smoking.clone();
    let stats = SuffStats::new(&data, &ys).unwrap();
    let prior = PriorSpec::default();
    let base = c.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for id in BlockId::all(true) {
        let mut moved = base.clone();
        let mut v = id.get(&base, false);
        for x in v.iter_mut().take(id.dim(false)) {
            *x += rng.random_range(-0.3..0.3);
        }
        id.set(&mut moved, &v, false);
        let block = block_log_target(id, &moved, &stats, &prior, false)
            - block_log_target(id, &base, &stats, &prior, false);
        let full = full_log_posterior(&moved, &records, &ys, &prior)
            - full_log_posterior(&base, &records, &ys, &prior);
        assert!(
            (block - full).abs() < 1e-7 * (1.0 + full.abs()),
            "{}: {block} vs {full}",
            id.name()
        );
    }
}

/// Log posterior of the observed data: participants as observed, each
/// non-participant summed over both smoking states.
fn observed_log_posterior(p: &ModelParams, records: &[PersonRecord], prior: &PriorSpec) -> f64 {
    let cum = CumulativeBaseline::new(p);
    let mut lp = logprior(p, prior).value();
    for rec in records {
        let g = rec.gender.index();
        let follow = FollowUp::of(rec);
        let term = |y: bool| {
            let one = std::slice::from_ref(rec);
            loglik_participation(p, one, &[y])
                + loglik_smoking(p, one, &[y])
                + person_survival_loglik(p, g, usize::from(y), &follow, &cum)
        };
        lp += match rec.smoking {
            Some(y) => term(y),
            None => {
                let (a, b) = (term(true), term(false));
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            }
        };
    }
    lp
}

#[test]
fn collapsed_targets_match_observed_posterior_differences() {
    let c = scenario_from_paper_shape(0.01, 4).unwrap();
    let records = simulate_dataset(&c).unwrap().records;
    let data = PreparedData::new(records.clone()).unwrap();
    let prior = PriorSpec::default();
    let base = c.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // any imputation works; the collapsed target only reads participant counts
    let mut state = ChainState::initial(&data, &prior, Mode::Mnar, &mut rng);
    state.params = base.clone();
    let ratios = state.survival_log_ratios(Mode::Mnar);
    let cum = CumulativeBaseline::new(&base);
    for (i, rec) in records.iter().enumerate().filter(|(_, r)| !r.participated) {
        let (g, f) = (rec.gender.index(), FollowUp::of(rec));
        let w = person_survival_loglik(&base, g, 1, &f, &cum) - person_survival_loglik(&base, g, 0, &f, &cum);
        assert!((ratios[i] - w).abs() < 1e-9);
    }
    for id in BlockId::selection() {
        let BlockId::Selection { gender, year } = id else { unreachable!() };
        let mut moved = base.clone();
        let mut v = id.get(&base, false);
        for x in v.iter_mut().take(id.dim(false)) {
            *x += rng.random_range(-0.4..0.4);
        }
        id.set(&mut moved, &v, false);
        let target = |p: &ModelParams| {
            collapsed_log_target(gender, year, p, &data, &state.stats.part_m, &ratios, &prior, false)
        };
        let block = target(&moved) - target(&base);
        let full = observed_log_posterior(&moved, &records, &prior)
            - observed_log_posterior(&base, &records, &prior);
        assert!(
            (block - full).abs() < 1e-7 * (1.0 + full.abs()),
            "{}: {block} vs {full}",
            id.name()
        );
    }
}

#[test]
fn incremental_statistics_match_rebuild() {
    let c = scenario_from_paper_shape(0.01, 5).unwrap();
    let data = PreparedData::new(simulate_dataset(&c).unwrap().records).unwrap();
    let prior = PriorSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut state = ChainState::initial(&data, &prior, Mode::Mnar, &mut rng);
    for _ in 0..20 {
        state.impute(Mode::Mnar, &mut rng);
        assert_eq!(state.stats, SuffStats::build(&data, &state.ys));
    }
}

#[test]
fn suffstats_reject_bad_assignments() {
    let recs = vec![record(1, 40, true, Some(true), None), record(2, 40, false, None, None)];
    let data = PreparedData::new(recs).unwrap();
    assert!(SuffStats::new(&data, &[false, true]).is_err());
    assert!(SuffStats::new(&data, &[true]).is_err());
    assert!(SuffStats::new(&data, &[true, false]).is_ok());
}

#[test]
fn imputation_degenerate_probability() {
    let recs: Vec<PersonRecord> = (0..50).map(|i| record(i, 30 + (i % 20) as u32, false, None, None)).collect();
    let mut p = ModelParams::zeros(0.01);
    p.beta0[0][0][0] = 60.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ys = gibbs_impute_missing(&p, &recs, Mode::Mnar, &mut rng).unwrap();
    assert!(ys.iter().all(|&y| y));
}

#[test]
fn imputation_without_selection_follows_smoking_model() {
    let recs: Vec<PersonRecord> = (0..10_000)
        .map(|i| {
            let age = 25 + (i % 35) as u32;
            let event = (i % 7 == 0).then_some(age + 10);
            record(i, age, false, None, event)
        })
        .collect();
    let mut p = ModelParams::zeros(0.02);
    p.beta0[0][0][0] = -0.3;
    p.beta1[0][0][0] = 0.04;
    p.alpha0[0][0] = 1.0;
    // equal age slopes: participation carries no information on smoking
    p.alpha1[0] = [0.03, 0.03];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ys = gibbs_impute_missing(&p, &recs, Mode::Mnar, &mut rng).unwrap();
    let mut observed = [0.0; 35];
    let mut expected = [0.0; 35];
    let mut count = [0.0; 35];
    for (rec, &y) in recs.iter().zip(&ys) {
        let k = (rec.age - 25) as usize;
        let birth = 1972.0 - f64::from(rec.age) - 1938.0;
        observed[k] += f64::from(u8::from(y));
        expected[k] += inv_logit(-0.3 + 0.04 * birth);
        count[k] += 1.0;
    }
    let chi2: f64 = (0..35)
        .map(|k| {
            let (o, e, n) = (observed[k], expected[k], count[k]);
            (o - e).powi(2) / e + (o - e).powi(2) / (n - e)
        })
        .sum();
    let crit = ChiSquared::new(35.0).unwrap().inverse_cdf(0.999);
    assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
}

/// Joint posterior of the missing statuses by brute force over all
/// assignments, with survival written out year by year.
fn enumerate_joint(p: &ModelParams, recs: &[PersonRecord]) -> Vec<f64> {
    let n = recs.len();
    let mut w = vec![0.0; 1 << n];
    for (mask, slot) in w.iter_mut().enumerate() {
        let mut logw = 0.0;
        for (i, rec) in recs.iter().enumerate() {
            let y = (mask >> i) & 1;
            let age = f64::from(rec.age);
            let birth = 1972.0 - age - 1938.0;
            let ps = inv_logit(p.beta0[0][0][0] + birth * p.beta1[0][0][0]);
            logw += if y == 1 { ps.ln() } else { (1.0 - ps).ln() };
            let lin = p.alpha0[0][0] + p.eta[0][0] * y as f64 + p.alpha1[0][y] * (age - 45.0);
            logw += (1.0 - inv_logit(lin)).ln();
            let mult = (p.gamma[0] * y as f64).exp();
            let end = rec.t_obs.min(100);
            for t in rec.age..end {
                let h = p.h0[0][(t - FIRST_AGE) as usize] * mult;
                logw -= h;
                if rec.event && t + 1 == rec.t_obs {
                    logw += h.ln();
                }
            }
        }
        *slot = logw.exp();
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

#[test]
fn three_person_imputation_matches_enumeration() {
    let recs = vec![
        record(1, 30, false, None, None),
        record(2, 50, false, None, Some(62)),
        record(3, 58, false, None, Some(59)),
    ];
    let mut p = ModelParams::zeros(0.0);
    p.h0[0] = (0..76).map(|b| 0.002 * (1.0 + 0.05 * b as f64)).collect();
    p.beta0[0][0][0] = -0.2;
    p.beta1[0][0][0] = 0.03;
    p.alpha0[0][0] = 1.2;
    p.eta[0][0] = -0.9;
    p.alpha1[0] = [0.02, 0.01];
    p.gamma[0] = 1.1;
    let exact = enumerate_joint(&p, &recs);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sweeps = 100_000;
    let mut freq = [0.0; 8];
    for _ in 0..sweeps {
        let ys = gibbs_impute_missing(&p, &recs, Mode::Mnar, &mut rng).unwrap();
        let mask = ys.iter().enumerate().fold(0, |m, (i, &y)| m | (usize::from(y) << i));
        freq[mask] += 1.0 / sweeps as f64;
    }
    let tv: f64 = 0.5 * freq.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(tv < 0.01, "total variation {tv}");
}

/// CDF of Gamma(shape, rate) truncated to [lo, hi] by Simpson quadrature.
fn truncated_gamma_cdf_table(shape: f64, rate: f64, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / n as f64;
    let dens = |x: f64| ((shape - 1.0) * x.ln() - rate * x).exp();
    let mut cdf = vec![0.0; n + 1];
    for i in 0..n {
        let (a, b) = (lo + i as f64 * h, lo + (i + 1) as f64 * h);
        let piece = (b - a) / 6.0 * (dens(a) + 4.0 * dens(0.5 * (a + b)) + dens(b));
        cdf[i + 1] = cdf[i] + piece;
    }
    let total = cdf[n];
    cdf.iter().map(|c| c / total).collect()
}

#[test]
fn hazard_conditional_passes_ks_against_quadrature() {
    let (lo, hi, bin) = (0.002, 0.02, 10);
    let mut table = RiskGroupTable::new();
    table.set(0, 0, bin, 5, 1000.0);
    let mut p = ModelParams::zeros(0.0);
    p.h0[0] = (0..76).map(|b| if b < bin { lo } else { hi }).collect();
    let prior = PriorSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 100_000;
    let mut draws: Vec<f64> = (0..n)
        .map(|_| {
            update_hazard_bin(0, bin, &mut p, &table, &prior, &mut rng).unwrap();
            p.h0[0][bin]
        })
        .collect();
    draws.sort_by(f64::total_cmp);
    let grid = 20_000;
    let cdf = truncated_gamma_cdf_table(6.0, 1000.0, lo, hi, grid);
    let step = (hi - lo) / grid as f64;
    let mut ks: f64 = 0.0;
    for (i, &x) in draws.iter().enumerate() {
        let pos = ((x - lo) / step).clamp(0.0, grid as f64);
        let k = (pos.floor() as usize).min(grid - 1);
        let f = cdf[k] + (pos - k as f64) * (cdf[k + 1] - cdf[k]);
        ks = ks.max((f - i as f64 / n as f64).abs()).max((f - (i + 1) as f64 / n as f64).abs());
    }
    assert!(ks < 0.01, "KS {ks}");
}

#[test]
fn hazard_bin_between_equal_neighbours_is_fixed() {
    let table = RiskGroupTable::new();
    let mut p = ModelParams::zeros(0.0);
    p.h0[1] = (0..76).map(|b| if b < 30 { 0.01 } else { 0.05 }).collect();
    p.h0[1][30] = 0.01;
    p.h0[1][31] = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    update_hazard_bin(1, 30, &mut p, &table, &PriorSpec::default(), &mut rng).unwrap();
    assert_eq!(p.h0[1][30], 0.01);
    // no data on the top bin: a uniform draw below the cap
    update_hazard_bin(1, 75, &mut p, &table, &PriorSpec::default(), &mut rng).unwrap();
    assert!((0.05..=20.0).contains(&p.h0[1][75]));
}

fn run_block(
    id: BlockId,
    params: &mut ModelParams,
    stats: &SuffStats,
    prior: &PriorSpec,
    fixed_eta: bool,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; MAX_DIM]> {
    let mut prop = BlockProposal::new(id.dim(fixed_eta), [0.2; MAX_DIM]);
    let warm = steps / 10;
    let mut out = Vec::with_capacity(steps - warm);
    for i in 0..steps {
        if i == warm {
            prop.freeze();
        }
        metropolis_update_block(id, params, stats, prior, &mut prop, fixed_eta, 0.35, 100, rng);
        if i >= warm {
            out.push(id.get(params, fixed_eta));
        }
    }
    out
}

#[test]
fn smoking_block_matches_grid_posterior() {
    let recs: Vec<PersonRecord> = (0..30)
        .map(|i| {
            let age = 25 + (i * 7 % 35) as u32;
            record(i, age, true, Some(i % 3 == 0 || (age > 50 && i % 2 == 0)), None)
        })
        .collect();
    let data = PreparedData::new(recs.clone()).unwrap();
    let ys: Vec<bool> = recs.iter().map(|r| r.smoking.unwrap()).collect();
    let stats = SuffStats::new(&data, &ys).unwrap();
    let prior = PriorSpec::default();

    // oracle: dense 2-D grid over (beta0, beta1)
    let log_post = |b0: f64, b1: f64| -> f64 {
        let mut lp = -(b0 * b0 + b1 * b1) / (2.0 * prior.coef_variance);
        for (r, &y) in recs.iter().zip(&ys) {
            let lin = b0 + (1972.0 - f64::from(r.age) - 1938.0) * b1;
            lp += if y { -(-lin).exp().ln_1p() } else { -lin.exp().ln_1p() };
        }
        lp
    };
    let (n0, n1) = (400, 400);
    let (r0, r1) = ((-6.0, 6.0), (-0.5, 0.5));
    let mut best = f64::NEG_INFINITY;
    let mut grid = vec![0.0; n0 * n1];
    for i in 0..n0 {
        for j in 0..n1 {
            let b0 = r0.0 + (i as f64 + 0.5) * (r0.1 - r0.0) / n0 as f64;
            let b1 = r1.0 + (j as f64 + 0.5) * (r1.1 - r1.0) / n1 as f64;
            grid[i * n1 + j] = log_post(b0, b1);
            best = best.max(grid[i * n1 + j]);
        }
    }
    let (mut mass, mut first, mut edge) = (0.0, 0.0, 0.0);
    for i in 0..n0 {
        for j in 0..n1 {
            let w = (grid[i * n1 + j] - best).exp();
            let b0 = r0.0 + (i as f64 + 0.5) * (r0.1 - r0.0) / n0 as f64;
            mass += w;
            first += w * b0;
            if i == 0 || j == 0 || i == n0 - 1 || j == n1 - 1 {
                edge += w;
            }
        }
    }
    assert!(edge / mass < 1e-6, "grid too narrow");
    let oracle_mean = first / mass;

    let id = BlockId::Smoking {
        gender: 0,
        region: 0,
        year: 0,
    };
    let mut params = ModelParams::zeros(0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = run_block(id, &mut params, &stats, &prior, false, 200_000, &mut rng);
    let mean = draws.iter().map(|d| d[0]).sum::<f64>() / draws.len() as f64;
    assert!((mean - oracle_mean).abs() < 0.05, "{mean} vs {oracle_mean}");
}

#[test]
fn two_person_chain_matches_quadrature() {
    // one participant, one non-participant at the centring age: the
    // participation intercept has posterior prior x logistic density
    let recs = vec![
        record(1, 45, true, Some(false), None),
        record(2, 45, false, None, None),
    ];
    let data = PreparedData::new(recs).unwrap();
    let prior = PriorSpec::default();
    let mut params = ModelParams::zeros(0.0);
    params.beta0[0][0][0] = 0.4;
    let ys = vec![false, false];
    let stats = SuffStats::new(&data, &ys).unwrap();
    let mut state = ChainState {
        data: &data,
        params,
        ys,
        stats,
    };
    let id = BlockId::Participation { gender: 0, year: 0 };
    let mut prop = BlockProposal::new(1, [1.0; MAX_DIM]);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (lo, hi, bins) = (-10.0, 10.0, 40);
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0.0; bins + 2];
    let steps = 300_000;
    let warm = 20_000;
    for i in 0..steps {
        if i == warm {
            prop.freeze();
        }
        state.impute(Mode::Mar, &mut rng);
        metropolis_update_block(id, &mut state.params, &state.stats, &prior, &mut prop, true, 0.35, 100, &mut rng);
        if i >= warm {
            let a = state.params.alpha0[0][0];
            let k = if a < lo { 0 } else if a >= hi { bins + 1 } else { 1 + ((a - lo) / width) as usize };
            hist[k] += 1.0 / (steps - warm) as f64;
        }
    }
    // quadrature: density prop. to exp(-a²/2000) σ(a)(1-σ(a)) on a fine grid
    let dens = |a: f64| (-a * a / 2000.0).exp() * inv_logit(a) * (1.0 - inv_logit(a));
    let fine = 200;
    let (ext_lo, ext_hi) = (-60.0, 60.0);
    let mut exact = vec![0.0; bins + 2];
    let mut total = 0.0;
    let n_fine = ((ext_hi - ext_lo) / width) as usize * fine;
    let dx = (ext_hi - ext_lo) / n_fine as f64;
    for i in 0..n_fine {
        let a = ext_lo + (i as f64 + 0.5) * dx;
        let w = dens(a) * dx;
        let k = if a < lo { 0 } else if a >= hi { bins + 1 } else { 1 + ((a - lo) / width) as usize };
        exact[k] += w;
        total += w;
    }
    let tv: f64 = 0.5 * hist.iter().zip(&exact).map(|(h, e)| (h - e / total).abs()).sum::<f64>();
    assert!(tv < 0.05, "total variation {tv}");
}
