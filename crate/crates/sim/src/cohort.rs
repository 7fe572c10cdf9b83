//! Population specs and cohort runs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};
use vrlab_client::Client;
use vrlab_core::api::Ticket;
use vrlab_core::config::ExperimentConfig;

use crate::driver::{drive, join, ParticipantModel, ParticipantOptions, SessionRecord, DEFAULT_TRACKING_HZ};
use crate::models::{DrummerModel, MoverModel, ResponderModel};
use crate::SimError;

/// Normal distribution over a per-participant parameter; `sd` 0 pins it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dist {
    pub mean: f64,
    #[serde(default)]
    pub sd: f64,
}

impl Dist {
    pub fn fixed(mean: f64) -> Self {
        Dist { mean, sd: 0.0 }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.sd > 0.0 {
            Normal::new(self.mean, self.sd).expect("sd > 0").sample(rng)
        } else {
            self.mean
        }
    }

    /// Draw kept at or above `floor`, for strictly positive parameters.
    pub fn sample_above(&self, floor: f64, rng: &mut impl Rng) -> f64 {
        self.sample(rng).max(floor)
    }
}

/// Population-level behavior, instantiated per participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Behavior {
    Responder {
        pse: Dist,
        slope: Dist,
        #[serde(default)]
        lapse: f64,
    },
    FixedResponder {
        faster: bool,
    },
    Mover {
        intercept: f64,
        coefficients: BTreeMap<String, f64>,
        noise_sd: f64,
    },
    Drummer {
        /// Jitter SD on every tracker axis, meters.
        base_sd: f64,
        /// Avatar-condition jitter multiplier by group; `*` covers the rest.
        condition_scale: BTreeMap<String, Dist>,
        tempo: Dist,
    },
}

const MIN_SLOPE: f64 = 1e-3;
const MIN_SCALE: f64 = 0.05;
const MIN_TEMPO: f64 = 0.2;

impl Behavior {
    pub fn instantiate(&self, group: Option<&str>, rng: &mut impl Rng) -> Result<ParticipantModel, SimError> {
        Ok(match self {
            Behavior::Responder { pse, slope, lapse } => ParticipantModel::Responder(ResponderModel::new(
                pse.sample(rng),
                slope.sample_above(MIN_SLOPE, rng),
                *lapse,
            )?),
            Behavior::FixedResponder { faster } => ParticipantModel::FixedResponder { faster: *faster },
            Behavior::Mover {
                intercept,
                coefficients,
                noise_sd,
            } => ParticipantModel::Mover(MoverModel::new(*intercept, coefficients.clone(), *noise_sd)?),
            Behavior::Drummer {
                base_sd,
                condition_scale,
                tempo,
            } => {
                let scale = group
                    .and_then(|g| condition_scale.get(g))
                    .or_else(|| condition_scale.get("*"))
                    .copied()
                    .unwrap_or(Dist::fixed(1.0));
                ParticipantModel::Drummer(DrummerModel::new(
                    [*base_sd; 9],
                    scale.sample_above(MIN_SCALE, rng),
                    tempo.sample_above(MIN_TEMPO, rng),
                )?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: String,
    pub count: usize,
    pub behavior: Behavior,
}

/// Who takes part: behavior segments, portal dropouts by group and the
/// tracking rate recorded for the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    /// Bundled experiment this cohort is meant for.
    pub experiment: String,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub portal_dropouts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking_rate_hz: Option<f64>,
}

impl CohortSpec {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let spec: CohortSpec = serde_json::from_str(text).map_err(|e| SimError::Config(format!("cohort spec: {e}")))?;
        if spec.segments.is_empty() {
            return Err(SimError::Config("cohort spec has no segments".into()));
        }
        Ok(spec)
    }

    pub fn size(&self) -> usize {
        self.segments.iter().map(|s| s.count).sum()
    }

    pub fn tracking_rate(&self) -> f64 {
        self.tracking_rate_hz.unwrap_or(DEFAULT_TRACKING_HZ)
    }

    /// Segment index per participant for a cohort of `n`: counts scaled by
    /// largest remainder, then shuffled.
    pub fn roles(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        let total = self.size().max(1) as f64;
        let exact: Vec<f64> = self.segments.iter().map(|s| s.count as f64 * n as f64 / total).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let short = n - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        let mut roles: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat_n(i, c))
            .collect();
        roles.shuffle(rng);
        roles
    }

    fn dropouts_for(&self, group: &str, n: usize) -> usize {
        let want = self.portal_dropouts.get(group).copied().unwrap_or(0);
        ((want as f64) * n as f64 / self.size().max(1) as f64).round() as usize
    }
}

pub mod bundled {
    use super::CohortSpec;

    pub const HAND_REDIRECTION: &str = include_str!("../cohorts/hand_redirection.json");
    pub const PROTEUS_DRUMMING: &str = include_str!("../cohorts/proteus_drumming.json");
    pub const FITTS_3D: &str = include_str!("../cohorts/fitts_3d.json");

    /// Cohort for a bundled experiment id.
    pub fn cohort(experiment: &str) -> Option<CohortSpec> {
        let text = match experiment {
            "hand_redirection" => HAND_REDIRECTION,
            "proteus_drumming" => PROTEUS_DRUMMING,
            "fitts_3d" => FITTS_3D,
            _ => return None,
        };
        Some(CohortSpec::from_json(text).expect("bundled cohort parses"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CohortOptions {
    /// Participants in flight at once after the join phase.
    pub parallelism: usize,
}

impl Default for CohortOptions {
    fn default() -> Self {
        CohortOptions { parallelism: 8 }
    }
}

#[derive(Debug, Default)]
pub struct CohortOutcome {
    pub records: Vec<SessionRecord>,
    /// Participant index and the error that stopped them.
    pub failures: Vec<(usize, SimError)>,
}

/// Seed for participant `i`, decorrelated from the cohort seed.
pub fn participant_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed ^ (i as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Enrolled {
    index: usize,
    role: usize,
    ticket: Ticket,
    model: ParticipantModel,
    opts: ParticipantOptions,
}

/// Runs `n` participants: joins happen one at a time in index order, so
/// identifiers and group assignment depend only on the seed; the sessions
/// then run with bounded parallelism. A failing participant does not stop
/// the others.
pub fn run_cohort(
    client: &Client,
    experiment_id: &str,
    spec: &CohortSpec,
    n: usize,
    seed: u64,
    options: CohortOptions,
) -> Result<CohortOutcome, SimError> {
    if n == 0 {
        return Err(SimError::EmptyCohort);
    }
    let config: ExperimentConfig = client.experiment(experiment_id)?.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roles = spec.roles(n, &mut rng);

    let mut outcome = CohortOutcome::default();
    let mut enrolled = Vec::with_capacity(n);
    for (i, &role) in roles.iter().enumerate() {
        let pseed = participant_seed(seed, i);
        let opts = ParticipantOptions {
            participant_id: format!("sim-{seed:x}-{i:05}"),
            dropout_at_portal: false,
            tracking_rate_hz: spec.tracking_rate(),
            seed: pseed,
        };
        let ticket = match join(client, experiment_id, &opts.participant_id) {
            Ok(t) => t,
            Err(e) => {
                warn!(participant = i, error = %e, "join failed");
                outcome.failures.push((i, e));
                continue;
            }
        };
        let mut model_rng = ChaCha8Rng::seed_from_u64(pseed ^ 0x5EED);
        match spec.segments[role].behavior.instantiate(ticket.group.as_deref(), &mut model_rng) {
            Ok(model) => enrolled.push(Enrolled {
                index: i,
                role,
                ticket,
                model,
                opts,
            }),
            Err(e) => outcome.failures.push((i, e)),
        }
    }
    mark_dropouts(spec, n, &mut enrolled, &mut rng);
    info!(experiment = experiment_id, joined = enrolled.len(), "cohort joined");

    let results = run_all(&enrolled, options.parallelism, |p| {
        drive(client, &config, p.ticket.clone(), &p.model, &p.opts)
    });
    for (p, r) in enrolled.iter().zip(results) {
        match r {
            Ok(mut rec) => {
                rec.segment = Some(spec.segments[p.role].label.clone());
                outcome.records.push(rec)
            }
            Err(e) => {
                warn!(participant = p.index, error = %e, "participant failed");
                outcome.failures.push((p.index, e));
            }
        }
    }
    Ok(outcome)
}

fn mark_dropouts(spec: &CohortSpec, n: usize, enrolled: &mut [Enrolled], rng: &mut ChaCha8Rng) {
    let mut by_group: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (k, p) in enrolled.iter().enumerate() {
        if let Some(g) = &p.ticket.group {
            by_group.entry(g.clone()).or_default().push(k);
        }
    }
    for (group, mut members) in by_group {
        let quota = spec.dropouts_for(&group, n).min(members.len());
        members.shuffle(rng);
        for &k in &members[..quota] {
            enrolled[k].opts.dropout_at_portal = true;
        }
    }
}

#[cfg(feature = "parallel")]
fn run_all<T: Sync, R: Send>(items: &[T], parallelism: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    use rayon::prelude::*;
    if parallelism <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_all<T: Sync, R: Send>(items: &[T], _parallelism: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    items.iter().map(f).collect()
}
