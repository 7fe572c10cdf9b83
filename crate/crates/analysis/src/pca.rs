//! Movement dimensionality (d95) and total displacement.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{AnalysisError, Result};

pub const VARIANCE_TARGET: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum D95Mode {
    /// Smallest component count reaching the target.
    #[default]
    Integer,
    /// Linear interpolation inside the component that crosses the target.
    Interpolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct D95Result {
    pub d95: usize,
    /// Fractional count; equals `d95` in integer mode.
    pub d95_value: f64,
    /// Per-component variance fractions, largest first.
    pub explained: Vec<f64>,
    pub total_displacement: f64,
}

/// Covariance eigenvalues, largest first, negatives from round-off clamped
/// to zero.
pub fn covariance_spectrum(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let means = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig
}

/// Smallest k whose cumulative explained fraction reaches `target`.
pub fn components_for(explained: &[f64], target: f64) -> (usize, f64) {
    let mut cum = 0.0;
    for (i, e) in explained.iter().enumerate() {
        let before = cum;
        cum += e;
        if cum >= target - 1e-12 {
            let frac = if *e > 0.0 { ((target - before) / e).clamp(0.0, 1.0) } else { 1.0 };
            return (i + 1, i as f64 + frac);
        }
    }
    (explained.len(), explained.len() as f64)
}

/// Sum over trackers and frames of the Euclidean step length. Columns are
/// consecutive (x, y, z) triples, one per tracker.
pub fn total_displacement(x: &DMatrix<f64>) -> f64 {
    let trackers = x.ncols() / 3;
    let mut total = 0.0;
    for t in 1..x.nrows() {
        for k in 0..trackers {
            let c = 3 * k;
            let d2: f64 = (0..3).map(|j| (x[(t, c + j)] - x[(t - 1, c + j)]).powi(2)).sum();
            total += d2.sqrt();
        }
    }
    total
}

pub fn compute_d95(x: &DMatrix<f64>) -> Result<D95Result> {
    compute_d95_with(x, D95Mode::Integer)
}

pub fn compute_d95_with(x: &DMatrix<f64>, mode: D95Mode) -> Result<D95Result> {
    let (n, d) = x.shape();
    if d == 0 || d % 3 != 0 {
        return Err(AnalysisError::Input(format!(
            "expected (x, y, z) column triples, got {d} columns"
        )));
    }
    if n <= d {
        return Err(AnalysisError::Input(format!("need more than {d} frames, got {n}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::Input("non-finite position".into()));
    }
    let eig = covariance_spectrum(x);
    let total: f64 = eig.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(AnalysisError::Degenerate("movement has zero variance".into()));
    }
    let explained: Vec<f64> = eig.iter().map(|v| v / total).collect();
    let (k, interp) = components_for(&explained, VARIANCE_TARGET);
    Ok(D95Result {
        d95: k,
        d95_value: match mode {
            D95Mode::Integer => k as f64,
            D95Mode::Interpolated => interp,
        },
        explained,
        total_displacement: total_displacement(x),
    })
}
