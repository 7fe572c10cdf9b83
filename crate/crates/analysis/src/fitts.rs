//! Fitts' law features for 3D pointing and the five published model forms.

use serde::{Deserialize, Serialize};

use crate::regression::{ols, RegressionReport};
use crate::{AnalysisError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdForm {
    /// log2(D/W + 1)
    #[default]
    Shannon,
    /// log2(2D/W)
    Original,
}

/// Geometry-derived predictors. Lengths in the stimulus unit (cm for the
/// bundled geometry), angles in degrees. y is up and z points forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittsFeatures {
    pub distance: f64,
    pub size: f64,
    pub id_bits: f64,
    pub depth: f64,
    pub theta: f64,
    pub sin_phi: f64,
    pub size_theta: f64,
}

impl FittsFeatures {
    /// Predictor by its regression-table name (`ID`, `sin(phi)`, `theta`,
    /// `Depth`, `Size x theta`).
    pub fn feature(&self, name: &str) -> Option<f64> {
        Some(match name {
            "ID" => self.id_bits,
            "sin(phi)" => self.sin_phi,
            "theta" => self.theta,
            "Depth" => self.depth,
            "Size x theta" => self.size_theta,
            _ => return None,
        })
    }
}

pub fn index_of_difficulty(distance: f64, size: f64, form: IdForm) -> f64 {
    match form {
        IdForm::Shannon => (distance / size + 1.0).log2(),
        IdForm::Original => (2.0 * distance / size).log2(),
    }
}

pub fn fitts_features(origin: [f64; 3], target: [f64; 3], size: f64) -> Result<FittsFeatures> {
    fitts_features_with(origin, target, size, IdForm::Shannon)
}

pub fn fitts_features_with(origin: [f64; 3], target: [f64; 3], size: f64, form: IdForm) -> Result<FittsFeatures> {
    if !(size > 0.0) || origin.iter().chain(&target).any(|v| !v.is_finite()) {
        return Err(AnalysisError::Input("target size must be positive and coordinates finite".into()));
    }
    let [dx, dy, dz] = [target[0] - origin[0], target[1] - origin[1], target[2] - origin[2]];
    let horizontal = dx.hypot(dz);
    let distance = (horizontal * horizontal + dy * dy).sqrt();
    if distance == 0.0 {
        return Err(AnalysisError::Input("target coincides with the start point".into()));
    }
    let theta = dy.atan2(horizontal).to_degrees();
    let sin_phi = if horizontal > 0.0 { dx / horizontal } else { 0.0 };
    Ok(FittsFeatures {
        distance,
        size,
        id_bits: index_of_difficulty(distance, size, form),
        depth: dz,
        theta,
        sin_phi,
        size_theta: size * theta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FittsModel {
    Hoffmann,
    Murata,
    Cha,
    Machuca,
    Clark,
}

impl FittsModel {
    pub const ALL: [FittsModel; 5] = [
        FittsModel::Hoffmann,
        FittsModel::Murata,
        FittsModel::Cha,
        FittsModel::Machuca,
        FittsModel::Clark,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FittsModel::Hoffmann => "Hoffmann (Fitts')",
            FittsModel::Murata => "Murata & Iwase",
            FittsModel::Cha => "Cha & Myung",
            FittsModel::Machuca => "Machuca & Stuerzlinger",
            FittsModel::Clark => "Clark et al.",
        }
    }

    pub fn feature_names(self) -> &'static [&'static str] {
        match self {
            FittsModel::Hoffmann => &["ID"],
            FittsModel::Murata => &["ID", "sin(phi)"],
            FittsModel::Cha => &["ID", "sin(phi)", "theta"],
            FittsModel::Machuca => &["ID", "Depth"],
            FittsModel::Clark => &["ID", "theta", "Size x theta"],
        }
    }

    pub fn row(self, f: &FittsFeatures) -> Vec<f64> {
        self.feature_names()
            .iter()
            .map(|name| f.feature(name).expect("model features are named"))
            .collect()
    }
}

impl std::str::FromStr for FittsModel {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "hoffmann" => FittsModel::Hoffmann,
            "murata" => FittsModel::Murata,
            "cha" => FittsModel::Cha,
            "machuca" => FittsModel::Machuca,
            "clark" => FittsModel::Clark,
            other => return Err(AnalysisError::Input(format!("unknown model `{other}`"))),
        })
    }
}

/// One pointing trial: geometry plus movement time in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointingTrial {
    pub features: FittsFeatures,
    pub movement_time_ms: f64,
}

/// Linear-interpolation quantile of sorted data (the common "type 7").
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Upper fence Q3 + 1.5·IQR of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierFence {
    pub q1: f64,
    pub q3: f64,
    pub upper: f64,
}

impl OutlierFence {
    pub fn of(times: &[f64]) -> Result<Self> {
        if times.is_empty() || times.iter().any(|t| !t.is_finite()) {
            return Err(AnalysisError::Input("need finite movement times".into()));
        }
        let mut s = times.to_vec();
        s.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&s, 0.25), quantile(&s, 0.75));
        Ok(OutlierFence {
            q1,
            q3,
            upper: q3 + 1.5 * (q3 - q1),
        })
    }

    pub fn keeps(&self, t: f64) -> bool {
        t <= self.upper
    }

    pub fn apply(&self, trials: &[PointingTrial]) -> Vec<PointingTrial> {
        trials.iter().copied().filter(|t| self.keeps(t.movement_time_ms)).collect()
    }
}

/// Drops trials slower than the pooled Q3 + 1.5·IQR fence. One pass: the
/// fence comes from the data as given.
pub fn remove_outliers(trials: &[PointingTrial]) -> Result<(Vec<PointingTrial>, OutlierFence)> {
    let times: Vec<f64> = trials.iter().map(|t| t.movement_time_ms).collect();
    let fence = OutlierFence::of(&times)?;
    Ok((fence.apply(trials), fence))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub model: FittsModel,
    pub report: RegressionReport,
}

/// Regresses movement time on the model's features. Outliers must already be
/// removed.
pub fn fit_model(model: FittsModel, trials: &[PointingTrial]) -> Result<ModelFit> {
    let names: Vec<String> = model.feature_names().iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<f64>> = trials.iter().map(|t| model.row(&t.features)).collect();
    let y: Vec<f64> = trials.iter().map(|t| t.movement_time_ms).collect();
    Ok(ModelFit {
        model,
        report: ols(&names, &rows, &y)?,
    })
}
