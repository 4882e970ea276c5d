//! Baseline prevalence estimators and RMSE scoring against a known truth.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::{PersonRecord, N_CELLS};
use crate::error::AnalysisError;
use crate::model::{centred_birth_year, inv_logit};
use crate::trend::{CellEstimate, TrendTable};

pub const COMPLETE_CASE: &str = "Complete case";
pub const MULTIPLE_IMPUTATION: &str = "MI";

fn z975() -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.975)
}

/// Wilson score interval for `k` successes in `n` trials, in percent.
pub fn wilson_interval(k: u32, n: u32) -> Option<CellEstimate> {
    if n == 0 {
        return None;
    }
    let z = z975();
    let n_f = f64::from(n);
    let p = f64::from(k) / n_f;
    let denom = 1.0 + z * z / n_f;
    let centre = (p + z * z / (2.0 * n_f)) / denom;
    let half = z / denom * (p * (1.0 - p) / n_f + z * z / (4.0 * n_f * n_f)).sqrt();
    // the bounds are exact at the boundaries; avoid rounding residue there
    let lower = if k == 0 { 0.0 } else { centre - half };
    let upper = if k == n { 1.0 } else { centre + half };
    Some(CellEstimate {
        mean: 100.0 * p,
        lower: 100.0 * lower.max(0.0),
        upper: 100.0 * upper.min(1.0),
    })
}

/// Prevalence among participants only. Records without a reporting cell
/// (missing region) are skipped.
pub fn complete_case_prevalence(records: &[PersonRecord]) -> TrendTable {
    let mut n = [0u32; N_CELLS];
    let mut k = [0u32; N_CELLS];
    for rec in records.iter().filter(|r| r.participated) {
        if let Some(cell) = rec.cell() {
            n[cell.index()] += 1;
            k[cell.index()] += u32::from(rec.smoking == Some(true));
        }
    }
    let mut table = TrendTable::new(COMPLETE_CASE);
    for i in 0..N_CELLS {
        table.cells[i] = wilson_interval(k[i], n[i]);
    }
    table
}

/// Root mean squared difference over all 32 cells, in percentage points.
pub fn rmse(estimated: &TrendTable, truth: &TrendTable) -> Result<f64, AnalysisError> {
    let a = estimated.means()?;
    let b = truth.means()?;
    if a.len() != b.len() {
        return Err(AnalysisError::CellMismatch);
    }
    let sse: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((sse / a.len() as f64).sqrt())
}

// Imputation-model design: per-cell intercept and birth-year slope, then per
// gender an event indicator, then per (gender, event) a slope on exit age.
const N_CELL_COLUMNS: usize = 2 * N_CELLS;
const EVENT_COLUMN: usize = N_CELL_COLUMNS;
const EXIT_AGE_COLUMN: usize = EVENT_COLUMN + 2;
pub const N_IMPUTATION_COLUMNS: usize = EXIT_AGE_COLUMN + 4;
const EXIT_AGE_CENTRE: f64 = 60.0;

/// Sparse design row: (column, value) pairs.
type Row = Vec<(usize, f64)>;

fn design_row(rec: &PersonRecord) -> Option<Row> {
    let cell = rec.cell()?;
    let g = rec.gender.index();
    let birth = centred_birth_year(f64::from(cell.year.year()), f64::from(rec.age)) / 10.0;
    let exit = (f64::from(rec.t_obs) - EXIT_AGE_CENTRE) / 10.0;
    let e = usize::from(rec.event);
    let mut row = vec![(2 * cell.index(), 1.0), (2 * cell.index() + 1, birth)];
    if rec.event {
        row.push((EVENT_COLUMN + g, 1.0));
    }
    row.push((EXIT_AGE_COLUMN + 2 * g + e, exit));
    Some(row)
}

fn linear_predictor(row: &Row, beta: &DVector<f64>) -> f64 {
    row.iter().map(|&(j, x)| x * beta[j]).sum()
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coefficients: DVector<f64>,
    /// Cholesky factor of the (penalized) observed information.
    info_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub penalty: f64,
    pub converged: bool,
}

/// Penalized maximum likelihood by Newton-Raphson; `penalty` is the ridge
/// weight on every coefficient.
fn fit_logistic(rows: &[Row], ys: &[bool], dim: usize, penalty: f64) -> Option<LogisticFit> {
    let mut beta = DVector::<f64>::zeros(dim);
    let mut converged = false;
    let mut last_chol = None;
    for _ in 0..100 {
        let mut grad = DVector::<f64>::zeros(dim);
        let mut info = DMatrix::<f64>::zeros(dim, dim);
        for (row, &y) in rows.iter().zip(ys) {
            let p = inv_logit(linear_predictor(row, &beta));
            let w = p * (1.0 - p);
            let resid = f64::from(u8::from(y)) - p;
            for &(a, xa) in row {
                grad[a] += xa * resid;
                for &(b, xb) in row {
                    info[(a, b)] += w * xa * xb;
                }
            }
        }
        for j in 0..dim {
            grad[j] -= penalty * beta[j];
            // unused columns would make the information singular
            info[(j, j)] += penalty.max(1e-10);
        }
        let chol = info.cholesky()?;
        let step = chol.solve(&grad);
        beta += &step;
        last_chol = Some(chol);
        if step.amax() < 1e-9 {
            converged = true;
            break;
        }
        if !beta.iter().all(|b| b.is_finite()) {
            return None;
        }
    }
    Some(LogisticFit {
        coefficients: beta,
        info_chol: last_chol?,
        penalty,
        converged,
    })
}

/// Signs of quasi-separation: failed convergence or coefficients so large
/// the fitted probabilities are numerically 0 or 1.
fn looks_separated(fit: &LogisticFit) -> bool {
    !fit.converged || fit.coefficients.amax() > 15.0
}

#[derive(Debug, Clone)]
pub struct ImputationResult {
    pub table: TrendTable,
    /// Per-imputation prevalence (%) per cell.
    pub imputations: Vec<[f64; N_CELLS]>,
    pub penalty: f64,
    pub warnings: Vec<String>,
}

/// Ridge weight used when the unpenalized fit separates.
const FALLBACK_PENALTY: f64 = 1.0;

/// Multiple imputation of missing smoking status under MAR.
///
/// A logistic model is fitted to participants; for each of `m` imputations a
/// coefficient vector is drawn from the normal approximation at the mode,
/// missing statuses are drawn, and cell prevalences are pooled with Rubin's
/// rules.
pub fn mar_multiple_imputation(
    records: &[PersonRecord],
    m: usize,
    seed: u64,
) -> Result<ImputationResult, AnalysisError> {
    if m < 2 {
        return Err(AnalysisError::Invalid(format!("need at least 2 imputations, got {m}")));
    }
    let mut cells = Vec::with_capacity(records.len());
    let mut rows = Vec::with_capacity(records.len());
    for rec in records {
        let cell = rec.cell().ok_or_else(|| {
            AnalysisError::Invalid(format!("record {}: region missing", rec.id))
        })?;
        cells.push(cell.index());
        rows.push(design_row(rec).unwrap());
    }
    let observed: Vec<usize> = (0..records.len()).filter(|&i| records[i].participated).collect();
    let missing: Vec<usize> = (0..records.len()).filter(|&i| !records[i].participated).collect();
    let fit_rows: Vec<Row> = observed.iter().map(|&i| rows[i].clone()).collect();
    let fit_ys: Vec<bool> = observed
        .iter()
        .map(|&i| records[i].smoking == Some(true))
        .collect();

    let mut warnings = Vec::new();
    let mut fit = fit_logistic(&fit_rows, &fit_ys, N_IMPUTATION_COLUMNS, 0.0);
    if fit.as_ref().is_none_or(looks_separated) {
        warnings.push(format!(
            "imputation model separates; refitted with ridge penalty {FALLBACK_PENALTY}"
        ));
        fit = fit_logistic(&fit_rows, &fit_ys, N_IMPUTATION_COLUMNS, FALLBACK_PENALTY);
    }
    let fit = fit.ok_or_else(|| AnalysisError::Invalid("imputation model failed to fit".into()))?;

    let mut n = [0u32; N_CELLS];
    let mut observed_smokers = [0u32; N_CELLS];
    for (i, rec) in records.iter().enumerate() {
        n[cells[i]] += 1;
        observed_smokers[cells[i]] += u32::from(rec.smoking == Some(true));
    }

    let imputations: Vec<[f64; N_CELLS]> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let z: DVector<f64> = DVector::from_fn(N_IMPUTATION_COLUMNS, |_, _| {
                StandardNormal.sample(&mut rng)
            });
            // L Lᵀ = information, so L⁻ᵀ z has the inverse-information covariance
            let shift = fit
                .info_chol
                .l()
                .transpose()
                .solve_upper_triangular(&z)
                .expect("triangular factor is nonsingular");
            let beta = &fit.coefficients + shift;
            let mut smokers = observed_smokers;
            for &i in &missing {
                if rng.random::<f64>() < inv_logit(linear_predictor(&rows[i], &beta)) {
                    smokers[cells[i]] += 1;
                }
            }
            let mut q = [0.0; N_CELLS];
            for c in 0..N_CELLS {
                q[c] = if n[c] > 0 {
                    100.0 * f64::from(smokers[c]) / f64::from(n[c])
                } else {
                    f64::NAN
                };
            }
            q
        })
        .collect();

    let mut table = TrendTable::new(MULTIPLE_IMPUTATION);
    for c in 0..N_CELLS {
        if n[c] == 0 {
            continue;
        }
        let q: Vec<f64> = imputations.iter().map(|x| x[c]).collect();
        let u: Vec<f64> = q
            .iter()
            .map(|&v| v * (100.0 - v) / f64::from(n[c]))
            .collect();
        table.cells[c] = Some(rubin_pool(&q, &u));
    }
    Ok(ImputationResult {
        table,
        imputations,
        penalty: fit.penalty,
        warnings,
    })
}

/// Pools per-imputation estimates `q` with within-imputation variances `u`.
pub fn rubin_pool(q: &[f64], u: &[f64]) -> CellEstimate {
    let m = q.len() as f64;
    let qbar = q.iter().sum::<f64>() / m;
    let ubar = u.iter().sum::<f64>() / m;
    let b = q.iter().map(|x| (x - qbar).powi(2)).sum::<f64>() / (m - 1.0);
    let total = ubar + (1.0 + 1.0 / m) * b;
    let crit = if b > 0.0 {
        let r = (1.0 + 1.0 / m) * b / ubar;
        let df = (m - 1.0) * (1.0 + 1.0 / r).powi(2);
        StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(0.975)
    } else {
        z975()
    };
    let half = crit * total.sqrt();
    CellEstimate {
        mean: qbar,
        lower: (qbar - half).max(0.0),
        upper: (qbar + half).min(100.0),
    }
}
