//! Per-participant psychometric fits for two-alternative speed judgements
//! and their group summary.
//!
//! Model: P(faster | g) = λ + (1 − 2λ)·σ((g − α)/s) with a fixed lapse λ.
//! The PSE is α; a threshold at probability p sits at
//! α + s·logit((p − λ)/(1 − 2λ)).

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{AnalysisError, Exec, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub lapse: f64,
    pub p_faster: f64,
    pub p_slower: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub min_slope: f64,
    pub max_slope: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lapse: 0.01,
            p_faster: 0.75,
            p_slower: 0.25,
            tolerance: 1e-8,
            max_iterations: 200,
            min_slope: 1e-3,
            max_slope: 10.0,
        }
    }
}

impl FitOptions {
    /// Offset from the PSE, in slope units, of the threshold at probability `p`.
    pub fn z_at(&self, p: f64) -> f64 {
        let q = (p - self.lapse) / (1.0 - 2.0 * self.lapse);
        (q / (1.0 - q)).ln()
    }

    pub fn probability(&self, gain: f64, pse: f64, slope: f64) -> f64 {
        let z = (gain - pse) / slope;
        self.lapse + (1.0 - 2.0 * self.lapse) * sigmoid(z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsychometricFit {
    pub n_trials: usize,
    /// Every response was the same; no fit is attempted.
    pub non_compliant: bool,
    pub converged: bool,
    pub iterations: usize,
    pub pse: Option<f64>,
    pub thr_faster: Option<f64>,
    pub thr_slower: Option<f64>,
    pub slope: Option<f64>,
    pub log_likelihood: Option<f64>,
    pub initial_log_likelihood: Option<f64>,
}

impl PsychometricFit {
    pub fn is_usable(&self) -> bool {
        !self.non_compliant && self.pse.is_some()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn log_likelihood(trials: &[(f64, bool)], pse: f64, slope: f64, opts: &FitOptions) -> f64 {
    trials
        .iter()
        .map(|&(g, faster)| {
            let p = opts.probability(g, pse, slope).clamp(1e-15, 1.0 - 1e-15);
            if faster {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

/// Gradient and expected information in (α, log s).
fn score(trials: &[(f64, bool)], alpha: f64, log_s: f64, opts: &FitOptions) -> (Vector2<f64>, Matrix2<f64>) {
    let s = log_s.exp();
    let mut grad = Vector2::zeros();
    let mut info = Matrix2::zeros();
    for &(g, faster) in trials {
        let z = (g - alpha) / s;
        let sg = sigmoid(z);
        let p = (opts.lapse + (1.0 - 2.0 * opts.lapse) * sg).clamp(1e-15, 1.0 - 1e-15);
        let dp_dz = (1.0 - 2.0 * opts.lapse) * sg * (1.0 - sg);
        let jac = Vector2::new(-1.0 / s, -z) * dp_dz;
        let y = if faster { 1.0 } else { 0.0 };
        grad += jac * ((y - p) / (p * (1.0 - p)));
        info += jac * jac.transpose() / (p * (1.0 - p));
    }
    (grad, info)
}

/// Maximum-likelihood fit by damped Fisher-scoring Newton steps on
/// (α, log s), started from the best point of a coarse grid.
pub fn fit_psychometric(trials: &[(f64, bool)]) -> Result<PsychometricFit> {
    fit_psychometric_with(trials, &FitOptions::default())
}

pub fn fit_psychometric_with(trials: &[(f64, bool)], opts: &FitOptions) -> Result<PsychometricFit> {
    if trials.iter().any(|(g, _)| !g.is_finite()) {
        return Err(AnalysisError::Input("non-finite gain".into()));
    }
    let mut gains: Vec<f64> = trials.iter().map(|t| t.0).collect();
    gains.sort_by(f64::total_cmp);
    gains.dedup();
    if gains.len() < 2 {
        return Err(AnalysisError::Input(format!(
            "need at least 2 distinct gains, got {}",
            gains.len()
        )));
    }
    let faster = trials.iter().filter(|t| t.1).count();
    if faster == 0 || faster == trials.len() {
        return Ok(PsychometricFit {
            n_trials: trials.len(),
            non_compliant: true,
            converged: false,
            iterations: 0,
            pse: None,
            thr_faster: None,
            thr_slower: None,
            slope: None,
            log_likelihood: None,
            initial_log_likelihood: None,
        });
    }

    let (lo, hi) = (gains[0], gains[gains.len() - 1]);
    let (min_ls, max_ls) = (opts.min_slope.ln(), opts.max_slope.ln());
    let ll = |a: f64, ls: f64| log_likelihood(trials, a, ls.exp(), opts);

    let mut best = (f64::NEG_INFINITY, lo, 0.0);
    for i in 0..=20 {
        let a = lo + (hi - lo) * i as f64 / 20.0;
        for s in [0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0] {
            let ls = f64::ln(s).clamp(min_ls, max_ls);
            let v = ll(a, ls);
            if v > best.0 {
                best = (v, a, ls);
            }
        }
    }
    let initial = best.0;
    let (mut a, mut ls, mut cur) = (best.1, best.2, best.0);

    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let (grad, mut info) = score(trials, a, ls, opts);
        let ridge = 1e-12 * (info.trace() + 1.0);
        info[(0, 0)] += ridge;
        info[(1, 1)] += ridge;
        let step = info
            .try_inverse()
            .map(|inv| inv * grad)
            .unwrap_or(grad);

        let mut t = 1.0;
        let mut moved = None;
        for _ in 0..40 {
            let na = a + t * step[0];
            let nls = (ls + t * step[1]).clamp(min_ls, max_ls);
            let v = ll(na, nls);
            if v.is_finite() && v >= cur {
                moved = Some((na, nls, v));
                break;
            }
            t *= 0.5;
        }
        let Some((na, nls, v)) = moved else {
            // No ascent direction left: we are at a (possibly bounded) optimum.
            converged = grad.norm() < 1e-6 || t * step.norm() < opts.tolerance;
            break;
        };
        let delta = (na - a).abs().max((nls - ls).abs());
        a = na;
        ls = nls;
        cur = v;
        if delta < opts.tolerance {
            converged = true;
            break;
        }
    }

    let s = ls.exp();
    Ok(PsychometricFit {
        n_trials: trials.len(),
        non_compliant: false,
        converged,
        iterations,
        pse: Some(a),
        thr_faster: Some(a + s * opts.z_at(opts.p_faster)),
        thr_slower: Some(a + s * opts.z_at(opts.p_slower)),
        slope: Some(s),
        log_likelihood: Some(cur),
        initial_log_likelihood: Some(initial),
    })
}

pub fn fit_many(participants: &[Vec<(f64, bool)>], exec: Exec) -> Vec<Result<PsychometricFit>> {
    exec.map(participants, |t| fit_psychometric(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub n_total: usize,
    pub n_excluded: usize,
    pub n_used: usize,
    pub exclusion_pct: f64,
    /// Faster threshold, PSE, slower threshold, in that order.
    pub metrics: Vec<MetricSummary>,
}

impl ThresholdSummary {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

/// Mean, sample SD and two-sided 95% t interval of the mean.
pub fn mean_sd_ci(xs: &[f64]) -> Result<(f64, f64, f64, f64)> {
    if xs.len() < 2 {
        return Err(AnalysisError::Input("need at least 2 values".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| AnalysisError::Input(e.to_string()))?
        .inverse_cdf(0.975);
    let half = t * sd / n.sqrt();
    Ok((mean, sd, mean - half, mean + half))
}

/// Group means with t-based 95% intervals over compliant fits.
pub fn aggregate_thresholds(fits: &[PsychometricFit]) -> Result<ThresholdSummary> {
    let used: Vec<&PsychometricFit> = fits.iter().filter(|f| f.is_usable()).collect();
    if used.is_empty() {
        return Err(AnalysisError::NoCompliantFits);
    }
    if used.len() < 2 {
        return Err(AnalysisError::Input("need at least 2 compliant fits".into()));
    }
    let column = |pick: fn(&PsychometricFit) -> Option<f64>| -> Vec<f64> {
        used.iter().filter_map(|f| pick(f)).collect()
    };
    let mut metrics = Vec::new();
    for (name, xs) in [
        ("faster", column(|f| f.thr_faster)),
        ("pse", column(|f| f.pse)),
        ("slower", column(|f| f.thr_slower)),
    ] {
        let (mean, sd, ci_low, ci_high) = mean_sd_ci(&xs)?;
        metrics.push(MetricSummary {
            metric: name.to_string(),
            mean,
            sd,
            ci_low,
            ci_high,
        });
    }
    let n_excluded = fits.len() - used.len();
    Ok(ThresholdSummary {
        n_total: fits.len(),
        n_excluded,
        n_used: used.len(),
        exclusion_pct: 100.0 * n_excluded as f64 / fits.len() as f64,
        metrics,
    })
}
