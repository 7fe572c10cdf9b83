//! Wilcoxon signed-rank and rank-sum tests.
//!
//! Small samples use the exact permutation distribution of the rank
//! statistic, built by dynamic programming over doubled midranks so ties are
//! handled exactly. Larger samples use the normal approximation with tie and
//! continuity corrections. Effect size is r = |z| / sqrt(N), N counting every
//! observation (both members of each pair for the signed-rank test).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{AnalysisError, Result};

/// Largest non-zero pair count for which the signed-rank test is exact.
pub const SIGNED_RANK_EXACT_MAX: usize = 12;
/// Largest smaller-sample size for which the rank-sum test is exact.
pub const RANK_SUM_EXACT_MAX: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub method: Method,
    /// Signed-rank: sum of ranks of positive differences. Rank-sum: rank sum
    /// of the first sample.
    pub statistic: f64,
    pub z: f64,
    /// Two-sided.
    pub p: f64,
    pub cohen_r: f64,
    /// Pairs for the signed-rank test, total observations for rank-sum.
    pub n: usize,
}

/// Doubled midranks (integers) and the tie-group sizes, for values already
/// in any order.
pub fn doubled_midranks(values: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1; doubled midrank is their sum of ends.
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            ranks[k] = doubled;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

fn two_sided(lower: f64, upper: f64) -> f64 {
    (2.0 * lower.min(upper)).min(1.0)
}

fn normal_two_sided(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * (1.0 - n.cdf(z.abs()))).min(1.0)
}

fn corrected_z(stat: f64, mean: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return 0.0;
    }
    let dev = stat - mean;
    let adj = (dev.abs() - 0.5).max(0.0);
    dev.signum() * adj / var.sqrt()
}

/// Exact two-sided p of the signed-rank statistic given doubled ranks of the
/// absolute differences and the observed doubled positive-rank sum.
pub fn signed_rank_exact_p(doubled_ranks: &[u64], observed: u64) -> f64 {
    let max: u64 = doubled_ranks.iter().sum();
    let mut dist = vec![0.0f64; max as usize + 1];
    dist[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            let v = dist[s] * 0.5;
            dist[s] = v;
            dist[s + r] += v;
        }
        reach += r;
    }
    let lower: f64 = dist[..=observed as usize].iter().sum();
    let upper: f64 = dist[observed as usize..].iter().sum();
    two_sided(lower, upper)
}

/// Normal-approximation z and two-sided p for the signed-rank statistic.
pub fn signed_rank_normal(n: usize, positive_rank_sum: f64, ties: &[usize]) -> (f64, f64) {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    let z = corrected_z(positive_rank_sum, mean, var);
    (z, normal_two_sided(z))
}

/// Paired test on `second − first` for each `(first, second)` pair. Zero
/// differences are dropped before ranking.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<TestReport> {
    wilcoxon_signed_rank_with(pairs, Method::Auto)
}

pub fn wilcoxon_signed_rank_with(pairs: &[(f64, f64)], method: Method) -> Result<TestReport> {
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(AnalysisError::Input("non-finite value".into()));
    }
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| b - a).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(AnalysisError::Degenerate("all differences are zero".into()));
    }
    if diffs.len() < 5 {
        return Err(AnalysisError::TooFew(format!(
            "need at least 5 non-zero differences, got {}",
            diffs.len()
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = doubled_midranks(&abs);
    let w2: u64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let statistic = w2 as f64 / 2.0;
    let n = diffs.len();
    let (z, p_normal) = signed_rank_normal(n, statistic, &ties);
    let method = match method {
        Method::Auto if n <= SIGNED_RANK_EXACT_MAX => Method::Exact,
        Method::Auto => Method::Normal,
        m => m,
    };
    let p = match method {
        Method::Exact => signed_rank_exact_p(&ranks, w2),
        _ => p_normal,
    };
    Ok(TestReport {
        method,
        statistic,
        z,
        p,
        cohen_r: z.abs() / ((2 * pairs.len()) as f64).sqrt(),
        n: pairs.len(),
    })
}

/// Exact two-sided p of the rank sum of a subset of size `k` drawn from
/// items with the given doubled ranks.
pub fn rank_sum_exact_p(doubled_ranks: &[u64], k: usize, observed: u64) -> f64 {
    let max: u64 = {
        let mut r = doubled_ranks.to_vec();
        r.sort_unstable_by(|a, b| b.cmp(a));
        r.iter().take(k).sum()
    };
    let width = max as usize + 1;
    // dist[j][s]: number of j-subsets with doubled sum s, scaled to stay finite.
    let mut dist = vec![vec![0.0f64; width]; k + 1];
    dist[0][0] = 1.0;
    for (i, &r) in doubled_ranks.iter().enumerate() {
        let r = r as usize;
        for j in (1..=k.min(i + 1)).rev() {
            let (lo, hi) = dist.split_at_mut(j);
            let prev = &lo[j - 1];
            let cur = &mut hi[0];
            for s in (r..width).rev() {
                if prev[s - r] != 0.0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    let total: f64 = dist[k].iter().sum();
    let obs = observed as usize;
    let lower: f64 = dist[k][..=obs.min(width - 1)].iter().sum::<f64>() / total;
    let upper: f64 = if obs < width { dist[k][obs..].iter().sum::<f64>() / total } else { 0.0 };
    two_sided(lower, upper)
}

pub fn rank_sum_normal(n1: usize, n2: usize, rank_sum: f64, ties: &[usize]) -> (f64, f64) {
    let (a, b) = (n1 as f64, n2 as f64);
    let n = a + b;
    let mean = a * (n + 1.0) / 2.0;
    let tie: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = a * b / 12.0 * ((n + 1.0) - tie / (n * (n - 1.0)));
    let z = corrected_z(rank_sum, mean, var);
    (z, normal_two_sided(z))
}

/// Two-sample test; the statistic is the rank sum of `a` in the pooled sample.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<TestReport> {
    wilcoxon_rank_sum_with(a, b, Method::Auto)
}

pub fn wilcoxon_rank_sum_with(a: &[f64], b: &[f64], method: Method) -> Result<TestReport> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::TooFew("both samples must be non-empty".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(AnalysisError::Input("non-finite value".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_midranks(&pooled);
    if ties.first() == Some(&pooled.len()) {
        return Err(AnalysisError::Degenerate("all values are tied".into()));
    }
    let w2a: u64 = ranks[..a.len()].iter().sum();
    let statistic = w2a as f64 / 2.0;
    let (z, p_normal) = rank_sum_normal(a.len(), b.len(), statistic, &ties);
    let small = a.len().min(b.len());
    let method = match method {
        Method::Auto if small <= RANK_SUM_EXACT_MAX => Method::Exact,
        Method::Auto => Method::Normal,
        m => m,
    };
    let p = match method {
        Method::Exact => {
            if a.len() <= b.len() {
                rank_sum_exact_p(&ranks, a.len(), w2a)
            } else {
                let w2b: u64 = ranks[a.len()..].iter().sum();
                rank_sum_exact_p(&ranks, b.len(), w2b)
            }
        }
        _ => p_normal,
    };
    Ok(TestReport {
        method,
        statistic,
        z,
        p,
        cohen_r: z.abs() / (pooled.len() as f64).sqrt(),
        n: pooled.len(),
    })
}
