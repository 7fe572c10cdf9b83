//! Parametric behavior generators. They aim for analyses that recover the
//! planted parameters, not for human realism.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vrlab_analysis::fitts::FittsFeatures;
use vrlab_core::dataplane::Pose;

use crate::SimError;

/// Binary "was the virtual hand faster?" judgments on a logistic curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponderModel {
    /// Gain judged faster half the time (lapses aside).
    pub pse: f64,
    /// Logistic scale, in gain units.
    pub slope: f64,
    /// Probability mass lost at each asymptote.
    pub lapse: f64,
}

impl ResponderModel {
    pub fn new(pse: f64, slope: f64, lapse: f64) -> Result<Self, SimError> {
        if !(slope > 0.0) || !(0.0..0.5).contains(&lapse) || !pse.is_finite() {
            return Err(SimError::Model(format!(
                "responder needs slope > 0 and 0 <= lapse < 0.5 (got slope {slope}, lapse {lapse})"
            )));
        }
        Ok(ResponderModel { pse, slope, lapse })
    }

    pub fn p_faster(&self, gain: f64) -> f64 {
        let z = (gain - self.pse) / self.slope;
        self.lapse + (1.0 - 2.0 * self.lapse) / (1.0 + (-z).exp())
    }

    pub fn respond(&self, gain: f64, rng: &mut impl Rng) -> bool {
        rng.random::<f64>() < self.p_faster(gain)
    }
}

/// Movement time as a linear function of target geometry plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoverModel {
    /// Intercept, ms.
    pub intercept: f64,
    /// ms per unit of each named predictor (`ID`, `sin(phi)`, `theta`,
    /// `Depth`, `Size x theta`).
    pub coefficients: BTreeMap<String, f64>,
    pub noise_sd: f64,
}

impl MoverModel {
    pub fn new(intercept: f64, coefficients: BTreeMap<String, f64>, noise_sd: f64) -> Result<Self, SimError> {
        if !(noise_sd >= 0.0) {
            return Err(SimError::Model(format!("noise_sd must be >= 0, got {noise_sd}")));
        }
        let probe = FittsFeatures {
            distance: 0.0,
            size: 1.0,
            id_bits: 0.0,
            depth: 0.0,
            theta: 0.0,
            sin_phi: 0.0,
            size_theta: 0.0,
        };
        if let Some(bad) = coefficients.keys().find(|k| probe.feature(k).is_none()) {
            return Err(SimError::Model(format!("unknown predictor `{bad}`")));
        }
        Ok(MoverModel {
            intercept,
            coefficients,
            noise_sd,
        })
    }

    pub fn expected_ms(&self, features: &FittsFeatures) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .map(|(name, b)| b * features.feature(name).unwrap_or(0.0))
                .sum::<f64>()
    }

    pub fn movement_time(&self, features: &FittsFeatures, rng: &mut impl Rng) -> f64 {
        let mean = self.expected_ms(features);
        if self.noise_sd == 0.0 {
            return mean;
        }
        mean + Normal::new(0.0, self.noise_sd).expect("sd checked").sample(rng)
    }
}

pub const DRUM_TRACKERS: [&str; 3] = ["head", "left_hand", "right_hand"];

/// Seated drumming: alternating sinusoidal hand strikes plus Gaussian jitter
/// on every tracker axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrummerModel {
    /// Jitter SD per tracker axis, meters, ordered head, left hand, right
    /// hand, each x y z.
    pub base_sd: [f64; 9],
    /// Multiplier on the jitter SD in the avatar condition.
    pub condition_scale: f64,
    /// Strikes per second, per hand.
    pub tempo: f64,
}

const STRIKE_HEIGHT: f64 = 0.12;
const REST: [[f64; 3]; 3] = [[0.0, 1.25, 0.0], [-0.2, 0.85, 0.35], [0.2, 0.85, 0.35]];

impl DrummerModel {
    pub fn new(base_sd: [f64; 9], condition_scale: f64, tempo: f64) -> Result<Self, SimError> {
        if base_sd.iter().any(|s| !(*s >= 0.0)) || !(condition_scale > 0.0) || !(tempo > 0.0) {
            return Err(SimError::Model("drummer needs sd >= 0, condition_scale > 0, tempo > 0".into()));
        }
        Ok(DrummerModel {
            base_sd,
            condition_scale,
            tempo,
        })
    }

    /// Tracker poses at session time `t`.
    pub fn poses(&self, t: f64, avatar: bool, rng: &mut impl Rng) -> BTreeMap<String, Pose> {
        let scale = if avatar { self.condition_scale } else { 1.0 };
        let phase = 2.0 * std::f64::consts::PI * self.tempo * t;
        DRUM_TRACKERS
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let strike = match k {
                    1 => 0.5 * (1.0 + phase.sin()),
                    2 => 0.5 * (1.0 - phase.sin()),
                    _ => 0.0,
                };
                let mut p = REST[k];
                p[1] += STRIKE_HEIGHT * strike;
                for (axis, v) in p.iter_mut().enumerate() {
                    let sd = self.base_sd[3 * k + axis] * scale;
                    if sd > 0.0 {
                        *v += Normal::new(0.0, sd).expect("sd checked").sample(rng);
                    }
                }
                (name.to_string(), Pose::at(p))
            })
            .collect()
    }
}
