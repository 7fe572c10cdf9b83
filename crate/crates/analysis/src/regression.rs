//! Ordinary least squares with an intercept, via Householder QR.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{AnalysisError, Result};

pub const INTERCEPT: &str = "Intercept";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    /// Semi-partial correlation; not reported for the intercept.
    pub sr: Option<f64>,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub n: usize,
    pub coefficients: Vec<Coefficient>,
    pub r2: f64,
    pub adj_r2: f64,
    pub residual_se: f64,
    pub sse: f64,
    pub sst: f64,
}

impl RegressionReport {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

fn design(rows: &[Vec<f64>], k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), k + 1, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] })
}

/// Names of columns that are (numerically) linear combinations of the
/// columns before them, intercept included.
pub fn collinear_columns(names: &[String], rows: &[Vec<f64>]) -> Vec<String> {
    let x = design(rows, names.len());
    let scale = x.column_iter().map(|c| c.norm()).fold(0.0, f64::max).max(1.0);
    let mut kept: Vec<usize> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..x.ncols() {
        let mut cols = kept.clone();
        cols.push(j);
        let sub = x.select_columns(&cols);
        let qr = sub.qr();
        let r = qr.r();
        let last = r[(cols.len() - 1, cols.len() - 1)].abs();
        if last <= 1e-10 * scale * (x.nrows() as f64).sqrt() {
            bad.push(if j == 0 { INTERCEPT.to_string() } else { names[j - 1].clone() });
        } else {
            kept.push(j);
        }
    }
    bad
}

/// Fits `y = b0 + Σ b_j x_j`. `rows[i]` holds the feature values of
/// observation i in the order of `names`.
pub fn ols(names: &[String], rows: &[Vec<f64>], y: &[f64]) -> Result<RegressionReport> {
    let n = rows.len();
    let k = names.len();
    if y.len() != n {
        return Err(AnalysisError::Input("feature and response lengths differ".into()));
    }
    if rows.iter().any(|r| r.len() != k) {
        return Err(AnalysisError::Input("ragged feature rows".into()));
    }
    if n < k + 2 {
        return Err(AnalysisError::Input(format!(
            "need at least {} observations for {k} features, got {n}",
            k + 2
        )));
    }
    if rows.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::Input("non-finite value".into()));
    }
    let bad = collinear_columns(names, rows);
    if !bad.is_empty() {
        return Err(AnalysisError::RankDeficient(bad));
    }

    let x = design(rows, k);
    let yv = DVector::from_column_slice(y);
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * &yv;
    let r = qr.r();
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| AnalysisError::RankDeficient(names.to_vec()))?;

    let resid = &yv - &x * &beta;
    let sse = resid.norm_squared();
    let mean = yv.mean();
    let sst = yv.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    if sst <= 0.0 {
        return Err(AnalysisError::Degenerate("response has zero variance".into()));
    }
    let df = (n - k - 1) as f64;
    let r2 = 1.0 - sse / sst;
    let adj_r2 = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / df;
    let sigma2 = sse / df;

    // (XᵀX)⁻¹ = R⁻¹R⁻ᵀ
    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(k + 1, k + 1))
        .ok_or_else(|| AnalysisError::RankDeficient(names.to_vec()))?;
    let cov = &rinv * rinv.transpose() * sigma2;
    let tdist = StudentsT::new(0.0, 1.0, df).map_err(|e| AnalysisError::Input(e.to_string()))?;

    let coefficients = (0..=k)
        .map(|j| {
            let se = cov[(j, j)].max(0.0).sqrt();
            let t = if se > 0.0 { beta[j] / se } else { f64::INFINITY.copysign(beta[j]) };
            let p = if t.is_finite() { (2.0 * (1.0 - tdist.cdf(t.abs()))).min(1.0) } else { 0.0 };
            Coefficient {
                name: if j == 0 { INTERCEPT.to_string() } else { names[j - 1].clone() },
                estimate: beta[j],
                se,
                t,
                sr: (j > 0).then(|| t * ((1.0 - r2) / df).sqrt()),
                p,
            }
        })
        .collect();

    Ok(RegressionReport {
        n,
        coefficients,
        r2,
        adj_r2,
        residual_se: sigma2.sqrt(),
        sse,
        sst,
    })
}
