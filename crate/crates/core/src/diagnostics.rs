//! Convergence and posterior-geometry diagnostics over multi-chain output.

use serde::Serialize;

use crate::data::{Cell, N_CELLS};
use crate::error::AnalysisError;
use crate::trend::{CellEstimate, TrendTable};

pub const DEFAULT_RHAT_THRESHOLD: f64 = 1.01;
pub const STRONG_CORRELATION: f64 = 0.9;
const MIN_CHAIN_LENGTH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Rhat {
    Value(f64),
    /// No within- or between-chain variation at all.
    Constant,
    /// Chains are individually constant but disagree.
    Infinite,
}

impl Rhat {
    pub fn exceeds(self, threshold: f64) -> bool {
        match self {
            Rhat::Value(v) => v >= threshold || v.is_nan(),
            Rhat::Constant => false,
            Rhat::Infinite => true,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Rhat::Value(v) => Some(v),
            Rhat::Infinite => Some(f64::INFINITY),
            Rhat::Constant => None,
        }
    }
}

impl std::fmt::Display for Rhat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rhat::Value(v) => write!(f, "{v:.4}"),
            Rhat::Constant => f.write_str("constant"),
            Rhat::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhatReport {
    pub threshold: f64,
    pub names: Vec<String>,
    pub values: Vec<Rhat>,
}

impl RhatReport {
    /// Parameters at or above the threshold, in column order.
    pub fn flagged(&self) -> Vec<(&str, Rhat)> {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(_, r)| r.exceeds(self.threshold))
            .map(|(n, r)| (n.as_str(), *r))
            .collect()
    }

    pub fn converged(&self) -> bool {
        self.flagged().is_empty()
    }

    /// Largest non-constant R̂ among columns selected by `keep`.
    pub fn max_where(&self, keep: impl Fn(&str) -> bool) -> Option<(&str, f64)> {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| keep(n))
            .filter_map(|(n, r)| r.value().map(|v| (n.as_str(), v)))
            .fold(None, |best, (n, v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((n, v)),
            })
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["parameter", "rhat", "flag"])?;
        for (n, r) in self.names.iter().zip(&self.values) {
            let flag = if r.exceeds(self.threshold) { "FAIL" } else { "" };
            w.write_record([n.as_str(), &r.to_string(), flag])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Split-chain potential scale reduction for one parameter.
///
/// Each trace is cut into a first and last half (the middle draw is dropped
/// for odd lengths) and the halves are treated as separate chains.
pub fn rhat(traces: &[&[f64]]) -> Result<Rhat, AnalysisError> {
    if traces.len() < 2 {
        return Err(AnalysisError::TooFewChains {
            min: 2,
            found: traces.len(),
        });
    }
    let len = traces[0].len();
    if len < MIN_CHAIN_LENGTH || traces.iter().any(|t| t.len() != len) {
        return Err(AnalysisError::ChainLength {
            min: MIN_CHAIN_LENGTH,
        });
    }
    let half = len / 2;
    let mut means = Vec::with_capacity(2 * traces.len());
    let mut vars = Vec::with_capacity(2 * traces.len());
    for t in traces {
        for part in [&t[..half], &t[len - half..]] {
            let (m, v) = mean_var(part);
            means.push(m);
            vars.push(v);
        }
    }
    let n = half as f64;
    let w = vars.iter().sum::<f64>() / vars.len() as f64;
    let (_, between) = mean_var(&means);
    let b = n * between;
    // relative tolerance so floating noise on constant traces is not read as spread
    let scale = means.iter().fold(0.0f64, |a, m| a.max(m.abs())).max(1e-300);
    let tiny = (1e-13 * scale).powi(2);
    if w <= tiny {
        return Ok(if b / n <= tiny { Rhat::Constant } else { Rhat::Infinite });
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok(Rhat::Value((var_plus / w).sqrt()))
}

/// R̂ for every column of `chains[c][draw][param]`.
pub fn rhat_report(
    chains: &[&[Vec<f64>]],
    names: &[String],
    threshold: f64,
) -> Result<RhatReport, AnalysisError> {
    if chains.len() < 2 {
        return Err(AnalysisError::TooFewChains {
            min: 2,
            found: chains.len(),
        });
    }
    let mut values = Vec::with_capacity(names.len());
    for j in 0..names.len() {
        let cols: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.iter().map(|d| d[j]).collect())
            .collect();
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        values.push(rhat(&refs)?);
    }
    Ok(RhatReport {
        threshold,
        names: names.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelatedPair {
    pub first: String,
    pub second: String,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    /// Columns with non-zero variance, in input order.
    pub names: Vec<String>,
    /// Row-major `names.len()²` matrix.
    pub matrix: Vec<f64>,
    /// Pairs with |ρ| at or above [`STRONG_CORRELATION`].
    pub strong: Vec<CorrelatedPair>,
    /// Pairs reported regardless of strength: participation intercept with
    /// selection coefficient, and neighbouring hazard bins.
    pub highlighted: Vec<CorrelatedPair>,
    /// Constant columns left out of the matrix.
    pub excluded: Vec<String>,
}

impl CorrelationReport {
    pub fn rho(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        Some(self.matrix[i * self.names.len() + j])
    }
}

/// Pearson correlations over draws pooled across chains.
pub fn posterior_correlations(chains: &[&[Vec<f64>]], names: &[String]) -> CorrelationReport {
    let pooled: Vec<&Vec<f64>> = chains.iter().flat_map(|c| c.iter()).collect();
    let n = pooled.len() as f64;
    let p = names.len();
    let mut means = vec![0.0; p];
    for d in &pooled {
        for (m, v) in means.iter_mut().zip(d.iter()) {
            *m += v / n;
        }
    }
    let mut sds = vec![0.0; p];
    for d in &pooled {
        for j in 0..p {
            sds[j] += (d[j] - means[j]).powi(2);
        }
    }
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for j in 0..p {
        sds[j] = sds[j].sqrt();
        let first = pooled.first().map_or(0.0, |d| d[j]);
        if pooled.iter().any(|d| d[j] != first) {
            kept.push(j);
        } else {
            excluded.push(names[j].clone());
        }
    }
    let k = kept.len();
    let mut matrix = vec![0.0; k * k];
    for a in 0..k {
        matrix[a * k + a] = 1.0;
        for b in (a + 1)..k {
            let (i, j) = (kept[a], kept[b]);
            let cov: f64 = pooled
                .iter()
                .map(|d| (d[i] - means[i]) * (d[j] - means[j]))
                .sum();
            let rho = (cov / (sds[i] * sds[j])).clamp(-1.0, 1.0);
            matrix[a * k + b] = rho;
            matrix[b * k + a] = rho;
        }
    }
    let kept_names: Vec<String> = kept.iter().map(|&j| names[j].clone()).collect();
    let pair = |a: usize, b: usize| CorrelatedPair {
        first: kept_names[a].clone(),
        second: kept_names[b].clone(),
        rho: matrix[a * k + b],
    };
    let mut strong = Vec::new();
    for a in 0..k {
        for b in (a + 1)..k {
            if matrix[a * k + b].abs() >= STRONG_CORRELATION {
                strong.push(pair(a, b));
            }
        }
    }
    let idx = |name: &str| kept_names.iter().position(|n| n == name);
    let mut highlighted = Vec::new();
    for (a, name) in kept_names.iter().enumerate() {
        if let Some(rest) = name.strip_prefix("alpha0_") {
            if let Some(b) = idx(&format!("eta_{rest}")) {
                highlighted.push(pair(a, b));
            }
        }
        if let Some((head, t)) = name.rsplit_once("_t") {
            if head.starts_with("h0_") {
                if let Ok(t) = t.parse::<u32>() {
                    if let Some(b) = idx(&format!("{head}_t{}", t + 1)) {
                        highlighted.push(pair(a, b));
                    }
                }
            }
        }
    }
    CorrelationReport {
        names: kept_names,
        matrix,
        strong,
        highlighted,
        excluded,
    }
}

/// Type-1 empirical quantile (inverse of the empirical CDF) of sorted data.
pub fn quantile_type1(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = (p * n as f64).ceil() as usize;
    sorted[k.clamp(1, n) - 1]
}

/// Posterior mean and central 95% interval of cell prevalence (%), pooling
/// the smoker-count draws of all chains.
pub fn summarize_posterior(
    smokers: &[&[[u32; N_CELLS]]],
    cell_sizes: &[u32; N_CELLS],
    method: &str,
) -> Result<TrendTable, AnalysisError> {
    let total: usize = smokers.iter().map(|c| c.len()).sum();
    if total == 0 {
        return Err(AnalysisError::ChainLength { min: 1 });
    }
    let mut table = TrendTable::new(method);
    for cell in Cell::all() {
        let i = cell.index();
        if cell_sizes[i] == 0 {
            return Err(AnalysisError::MissingCell(cell.label()));
        }
        let size = f64::from(cell_sizes[i]);
        let mut v: Vec<f64> = smokers
            .iter()
            .flat_map(|c| c.iter().map(|s| 100.0 * f64::from(s[i]) / size))
            .collect();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        table.cells[i] = Some(CellEstimate {
            mean,
            lower: quantile_type1(&v, 0.025),
            upper: quantile_type1(&v, 0.975),
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn normal_chains(n_chains: usize, n: usize, offsets: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        (0..n_chains)
            .map(|c| (0..n).map(|_| d.sample(&mut rng) + offsets[c]).collect())
            .collect()
    }

    /// Direct transcription of the between/within formula on split halves.
    fn rhat_oracle(chains: &[Vec<f64>]) -> f64 {
        let half = chains[0].len() / 2;
        let parts: Vec<&[f64]> = chains
            .iter()
            .flat_map(|c| [&c[..half], &c[c.len() - half..]])
            .collect();
        let m = parts.len() as f64;
        let n = half as f64;
        let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / n).collect();
        let grand = means.iter().sum::<f64>() / m;
        let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
        let w = parts
            .iter()
            .zip(&means)
            .map(|(p, mu)| p.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
            .sum::<f64>()
            / m;
        (((n - 1.0) / n * w + b / n) / w).sqrt()
    }

    fn as_refs(c: &[Vec<f64>]) -> Vec<&[f64]> {
        c.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn iid_chains_pass() {
        let c = normal_chains(4, 1000, &[0.0; 4], 1);
        let r = rhat(&as_refs(&c)).unwrap().value().unwrap();
        assert!(r < 1.01, "{r}");
        assert!((r - rhat_oracle(&c)).abs() < 1e-12);
    }

    #[test]
    fn separated_chains_fail() {
        let c = normal_chains(2, 1000, &[0.0, 10.0], 2);
        let r = rhat(&as_refs(&c)).unwrap();
        assert!(r.value().unwrap() > 2.0);
        assert!(r.exceeds(DEFAULT_RHAT_THRESHOLD));
    }

    #[test]
    fn identical_chains_with_repeating_halves() {
        let half: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let trace: Vec<f64> = half.iter().chain(&half).copied().collect();
        let r = rhat(&[&trace, &trace]).unwrap().value().unwrap();
        assert!((r - (49.0f64 / 50.0).sqrt()).abs() < 1e-12);
        assert!(r <= 1.0);
    }

    #[test]
    fn constant_and_disagreeing_constant_chains() {
        let a = vec![0.0; 20];
        let b = vec![1.0; 20];
        assert_eq!(rhat(&[&a, &a]).unwrap(), Rhat::Constant);
        assert_eq!(rhat(&[&a, &b]).unwrap(), Rhat::Infinite);
        assert!(!Rhat::Constant.exceeds(1.01));
    }

    #[test]
    fn argument_checks() {
        let a = vec![0.0; 20];
        assert!(matches!(rhat(&[&a]), Err(AnalysisError::TooFewChains { .. })));
        assert!(matches!(rhat(&[&a[..5], &a[..5]]), Err(AnalysisError::ChainLength { .. })));
        assert!(matches!(rhat(&[&a, &a[..15]]), Err(AnalysisError::ChainLength { .. })));
    }

    #[test]
    fn report_flags_and_maxima() {
        let mixed = normal_chains(2, 200, &[0.0, 0.0], 3);
        let split = normal_chains(2, 200, &[0.0, 5.0], 4);
        let chains: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|c| (0..200).map(|i| vec![mixed[c][i], split[c][i], 0.0]).collect())
            .collect();
        let refs: Vec<&[Vec<f64>]> = chains.iter().map(Vec::as_slice).collect();
        let names = vec!["a".to_string(), "b".to_string(), "eta_x".to_string()];
        let rep = rhat_report(&refs, &names, 1.01).unwrap();
        assert_eq!(rep.flagged().len(), 1);
        assert_eq!(rep.flagged()[0].0, "b");
        assert_eq!(rep.values[2], Rhat::Constant);
        assert_eq!(rep.max_where(|n| n.starts_with("eta")), None);
        assert_eq!(rep.max_where(|_| true).unwrap().0, "b");
        assert!(!rep.converged());
    }

    #[test]
    fn correlations_of_independent_duplicated_and_negated_columns() {
        let cols = normal_chains(3, 10_000, &[0.0; 3], 5);
        let draws: Vec<Vec<f64>> = (0..10_000)
            .map(|i| vec![cols[0][i], cols[1][i], cols[2][i], cols[0][i], -cols[1][i], 4.0])
            .collect();
        let names: Vec<String> = ["a", "b", "c", "a_copy", "b_neg", "k"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rep = posterior_correlations(&[&draws], &names);
        assert_eq!(rep.excluded, vec!["k".to_string()]);
        for (x, y) in [("a", "b"), ("a", "c"), ("b", "c")] {
            assert!(rep.rho(x, y).unwrap().abs() < 0.1);
        }
        assert!((rep.rho("a", "a_copy").unwrap() - 1.0).abs() < 1e-12);
        assert!((rep.rho("b", "b_neg").unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(rep.strong.len(), 2);
    }

    #[test]
    fn highlighted_pairs_use_parameter_names() {
        let names: Vec<String> = ["alpha0_g0_s1972", "eta_g0_s1972", "h0_g0_t25", "h0_g0_t26"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let draws: Vec<Vec<f64>> = (0..100)
            .map(|i| {
                let x = i as f64;
                vec![x, -x + (x * 0.7).sin(), x.sqrt(), x.sqrt() + 1.0]
            })
            .collect();
        let rep = posterior_correlations(&[&draws], &names);
        assert_eq!(rep.highlighted.len(), 2);
        assert_eq!(rep.highlighted[0].second, "eta_g0_s1972");
        assert!(rep.highlighted[0].rho < -0.9);
        assert_eq!(rep.highlighted[1].second, "h0_g0_t26");
    }

    #[test]
    fn posterior_summary_degenerate_and_uniform() {
        let sizes = [100u32; N_CELLS];
        let same = vec![[30u32; N_CELLS]; 50];
        let t = summarize_posterior(&[&same], &sizes, "Bayes+MNAR").unwrap();
        let e = t.cells[0].unwrap();
        assert_eq!((e.mean, e.lower, e.upper), (30.0, 30.0, 30.0));

        // each of 40..=60 repeated 100 times
        let draws: Vec<[u32; N_CELLS]> = (40..=60u32)
            .flat_map(|k| std::iter::repeat_n([k; N_CELLS], 100))
            .collect();
        let t = summarize_posterior(&[&draws], &sizes, "x").unwrap();
        let e = t.cells[7].unwrap();
        assert!((e.mean - 50.0).abs() < 1e-9);
        // oracle: sorted pooled values, order statistics at ceil(p n)
        let mut pooled: Vec<f64> = draws.iter().map(|d| f64::from(d[7])).collect();
        pooled.sort_by(f64::total_cmp);
        assert_eq!(e.lower, pooled[(0.025 * 2100.0f64).ceil() as usize - 1]);
        assert_eq!(e.upper, pooled[(0.975 * 2100.0f64).ceil() as usize - 1]);
        assert!((e.lower - 40.5).abs() <= 0.5 && (e.upper - 59.5).abs() <= 0.5);

        let mut bad = sizes;
        bad[3] = 0;
        assert!(matches!(
            summarize_posterior(&[&same], &bad, "x"),
            Err(AnalysisError::MissingCell(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn rhat_is_affine_invariant(seed in 0u64..1000, a in 0.1f64..50.0, b in -100.0f64..100.0) {
                let c = normal_chains(3, 60, &[0.0, 0.3, -0.2], seed);
                let t: Vec<Vec<f64>> = c.iter().map(|x| x.iter().map(|v| a * v + b).collect()).collect();
                let r1 = rhat(&as_refs(&c)).unwrap().value().unwrap();
                let r2 = rhat(&as_refs(&t)).unwrap().value().unwrap();
                prop_assert!((r1 - r2).abs() < 1e-9);
            }

            #[test]
            fn rhat_ignores_chain_order(seed in 0u64..1000) {
                let c = normal_chains(4, 40, &[0.0, 1.0, 0.5, -0.4], seed);
                let mut rev = c.clone();
                rev.reverse();
                let r1 = rhat(&as_refs(&c)).unwrap().value().unwrap();
                let r2 = rhat(&as_refs(&rev)).unwrap().value().unwrap();
                prop_assert!((r1 - r2).abs() < 1e-12);
                // lower bound reached when the between-half variance is zero
                prop_assert!(r1 >= (19.0f64 / 20.0).sqrt() - 1e-12);
            }
        }
    }
}
