//! The three replication analyses, run over exported session data.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use vrlab_core::dataplane::{export, ExportFormat, ExportKind, SessionMeta, SessionStatus, TrackingFrame, TrialRecord};
use vrlab_core::trial::Phase;
use vrlab_core::Scalar;

use crate::fitts::{fit_model, fitts_features_with, remove_outliers, FittsModel, IdForm, ModelFit, OutlierFence, PointingTrial};
use crate::pca::{compute_d95_with, D95Mode, D95Result};
use crate::psychometric::{aggregate_thresholds, fit_psychometric, mean_sd_ci, PsychometricFit, ThresholdSummary};
use crate::ranktest::{wilcoxon_rank_sum, wilcoxon_signed_rank, TestReport};
use crate::{AnalysisError, Exec, Result};

pub const GAIN_PARAM: &str = "gain";
pub const RESPONSE_MEASURE: &str = "faster";
pub const CONDITION_PARAM: &str = "condition";
pub const BASELINE: &str = "baseline";
pub const AVATAR: &str = "avatar";
pub const TRACKERS: [&str; 3] = ["head", "left_hand", "right_hand"];
pub const MOVEMENT_TIME: &str = "movement_time_ms";
pub const GEOMETRY: [&str; 7] = ["origin_x", "origin_y", "origin_z", "target_x", "target_y", "target_z", "size"];

/// Exported records of one experiment.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub sessions: Vec<SessionMeta>,
    pub trials: Vec<TrialRecord>,
    pub frames: Vec<TrackingFrame>,
}

impl Corpus {
    /// Reads `sessions`, `trials` and `frames` exports (csv or ndjson) from a
    /// directory. Missing files load as empty.
    pub fn load(dir: &Path) -> Result<Corpus> {
        let read = |kind: ExportKind| -> Result<Option<(Vec<u8>, ExportFormat)>> {
            for format in [ExportFormat::Json, ExportFormat::Csv] {
                let path = dir.join(format!("{}.{}", kind.as_str(), format.extension()));
                if path.exists() {
                    let bytes = std::fs::read(&path)
                        .map_err(|e| AnalysisError::Input(format!("{}: {e}", path.display())))?;
                    return Ok(Some((bytes, format)));
                }
            }
            Ok(None)
        };
        let imp = |e: vrlab_core::dataplane::DataError| AnalysisError::Input(e.to_string());
        let mut corpus = Corpus::default();
        if let Some((b, f)) = read(ExportKind::Sessions)? {
            corpus.sessions = export::read_sessions(&b, f).map_err(imp)?;
        }
        if let Some((b, f)) = read(ExportKind::Trials)? {
            corpus.trials = export::read_trials(&b, f).map_err(imp)?;
        }
        if let Some((b, f)) = read(ExportKind::Frames)? {
            corpus.frames = export::read_frames(&b, f).map_err(imp)?;
        }
        Ok(corpus)
    }

    /// Session ids to analyse: completed ones when session metadata is
    /// present, otherwise every session that has trials.
    pub fn analysable(&self) -> Option<HashSet<&str>> {
        (!self.sessions.is_empty()).then(|| {
            self.sessions
                .iter()
                .filter(|s| s.status == SessionStatus::Completed)
                .map(|s| s.session_id.as_str())
                .collect()
        })
    }
}

/// Main-phase trials grouped by session, sessions in first-seen order.
fn by_session<'a>(trials: &'a [TrialRecord], keep: Option<&HashSet<&str>>) -> Vec<(&'a str, Vec<&'a TrialRecord>)> {
    let mut order: Vec<&str> = Vec::new();
    let mut map: HashMap<&str, Vec<&TrialRecord>> = HashMap::new();
    for t in trials.iter().filter(|t| t.phase == Phase::Main) {
        if keep.is_some_and(|k| !k.contains(t.session_id.as_str())) {
            continue;
        }
        let e = map.entry(t.session_id.as_str()).or_insert_with(|| {
            order.push(t.session_id.as_str());
            Vec::new()
        });
        e.push(t);
    }
    order
        .into_iter()
        .map(|s| {
            let v = map.remove(s).unwrap_or_default();
            (s, v)
        })
        .collect()
}

fn number(map: &BTreeMap<String, Scalar>, key: &str) -> Option<f64> {
    map.get(key).and_then(Scalar::as_f64)
}

fn response(t: &TrialRecord) -> Option<bool> {
    match t.measures.get(RESPONSE_MEASURE)? {
        Scalar::Bool(b) => Some(*b),
        Scalar::Text(s) if s == "faster" => Some(true),
        Scalar::Text(s) if s == "slower" => Some(false),
        Scalar::Number(x) => Some(*x != 0.0),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantFit {
    pub session_id: String,
    pub fit: PsychometricFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsychometricReport {
    pub participants: Vec<ParticipantFit>,
    pub summary: ThresholdSummary,
}

pub fn psychometric_report(corpus: &Corpus, exec: Exec) -> Result<PsychometricReport> {
    let keep = corpus.analysable();
    let sessions = by_session(&corpus.trials, keep.as_ref());
    let inputs: Vec<(String, Vec<(f64, bool)>)> = sessions
        .into_iter()
        .map(|(s, ts)| {
            let pts = ts
                .iter()
                .filter_map(|t| Some((number(&t.params, GAIN_PARAM)?, response(t)?)))
                .collect();
            (s.to_string(), pts)
        })
        .collect();
    if inputs.is_empty() {
        return Err(AnalysisError::Input("no trials with a gain and a response".into()));
    }
    let fits = exec.map(&inputs, |(_, pts)| fit_psychometric(pts));
    let participants = inputs
        .iter()
        .zip(fits)
        .map(|((s, _), f)| {
            Ok(ParticipantFit {
                session_id: s.clone(),
                fit: f?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fits: Vec<PsychometricFit> = participants.iter().map(|p| p.fit.clone()).collect();
    Ok(PsychometricReport {
        summary: aggregate_thresholds(&fits)?,
        participants,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantMovement {
    pub session_id: String,
    pub group: String,
    pub baseline: D95Result,
    pub avatar: D95Result,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub group: String,
    pub n: usize,
    pub base_mean: f64,
    pub base_sd: f64,
    pub exp_mean: f64,
    pub exp_sd: f64,
    /// Baseline vs avatar, paired. `None` when every difference is zero or
    /// too few differ.
    pub test: Option<TestReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub metric: String,
    pub groups: Vec<GroupComparison>,
    /// Between the first two groups, on baseline and avatar values.
    pub between_base: Option<TestReport>,
    pub between_exp: Option<TestReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProteusReport {
    pub n_joined: usize,
    pub n_dropped: usize,
    pub participants: Vec<ParticipantMovement>,
    pub d95: MetricTable,
    pub displacement: MetricTable,
}

fn movement_matrix(frames: &[&TrackingFrame], start: f64, end: f64) -> Result<DMatrix<f64>> {
    let rows: Vec<&TrackingFrame> = frames.iter().copied().filter(|f| f.t >= start && f.t <= end).collect();
    let mut m = DMatrix::zeros(rows.len(), 3 * TRACKERS.len());
    for (i, f) in rows.iter().enumerate() {
        for (k, name) in TRACKERS.iter().enumerate() {
            let pose = f.poses.get(*name).ok_or_else(|| {
                AnalysisError::Input(format!("frame {} of {} lacks tracker `{name}`", f.frame_index, f.session_id))
            })?;
            for j in 0..3 {
                m[(i, 3 * k + j)] = pose.position[j];
            }
        }
    }
    Ok(m)
}

// Integer d95 values tie often, and small groups happen; neither has a test.
fn untestable_as_none(r: Result<TestReport>) -> Result<Option<TestReport>> {
    match r {
        Ok(t) => Ok(Some(t)),
        Err(AnalysisError::Degenerate(_) | AnalysisError::TooFew(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Paired samples as (baseline, avatar) per participant of one group.
pub fn compare_group(group: &str, pairs: &[(f64, f64)]) -> Result<GroupComparison> {
    let base: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let exp: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (base_mean, base_sd, ..) = mean_sd_ci(&base)?;
    let (exp_mean, exp_sd, ..) = mean_sd_ci(&exp)?;
    Ok(GroupComparison {
        group: group.to_string(),
        n: pairs.len(),
        base_mean,
        base_sd,
        exp_mean,
        exp_sd,
        test: untestable_as_none(wilcoxon_signed_rank(pairs))?,
    })
}

fn metric_table(metric: &str, groups: &[(String, Vec<(f64, f64)>)]) -> Result<MetricTable> {
    let rows = groups
        .iter()
        .map(|(g, pairs)| compare_group(g, pairs))
        .collect::<Result<Vec<_>>>()?;
    let (between_base, between_exp) = match groups {
        [a, b, ..] => {
            let col = |v: &[(f64, f64)], first: bool| -> Vec<f64> {
                v.iter().map(|p| if first { p.0 } else { p.1 }).collect()
            };
            (
                untestable_as_none(wilcoxon_rank_sum(&col(&a.1, true), &col(&b.1, true)))?,
                untestable_as_none(wilcoxon_rank_sum(&col(&a.1, false), &col(&b.1, false)))?,
            )
        }
        _ => (None, None),
    };
    Ok(MetricTable {
        metric: metric.to_string(),
        groups: rows,
        between_base,
        between_exp,
    })
}

/// d95 and total displacement per participant and condition, with paired
/// tests within each group and rank-sum tests between groups.
pub fn proteus_report(corpus: &Corpus, mode: D95Mode, exec: Exec) -> Result<ProteusReport> {
    let completed: Vec<&SessionMeta> = corpus
        .sessions
        .iter()
        .filter(|s| s.status == SessionStatus::Completed)
        .collect();
    if completed.is_empty() {
        return Err(AnalysisError::Input("no completed sessions with group metadata".into()));
    }
    let mut frames: HashMap<&str, Vec<&TrackingFrame>> = HashMap::new();
    for f in &corpus.frames {
        frames.entry(f.session_id.as_str()).or_default().push(f);
    }
    let mut windows: HashMap<(&str, &str), (f64, f64)> = HashMap::new();
    for t in corpus.trials.iter().filter(|t| t.phase == Phase::Main) {
        if let Some(Scalar::Text(c)) = t.params.get(CONDITION_PARAM) {
            windows.insert((t.session_id.as_str(), c.as_str()), (t.t_start, t.t_end));
        }
    }

    let results = exec.map(&completed, |s| -> Result<ParticipantMovement> {
        let sid = s.session_id.as_str();
        let fs = frames.get(sid).map(Vec::as_slice).unwrap_or(&[]);
        let segment = |cond: &str| -> Result<D95Result> {
            let (a, b) = windows
                .get(&(sid, cond))
                .ok_or_else(|| AnalysisError::Input(format!("session {sid} has no `{cond}` trial")))?;
            compute_d95_with(&movement_matrix(fs, *a, *b)?, mode)
        };
        Ok(ParticipantMovement {
            session_id: s.session_id.clone(),
            group: s.group.clone().unwrap_or_default(),
            baseline: segment(BASELINE)?,
            avatar: segment(AVATAR)?,
        })
    });
    let participants = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut labels: Vec<String> = participants.iter().map(|p| p.group.clone()).collect();
    labels.sort();
    labels.dedup();
    let pairs = |pick: fn(&D95Result) -> f64| -> Vec<(String, Vec<(f64, f64)>)> {
        labels
            .iter()
            .map(|g| {
                let v = participants
                    .iter()
                    .filter(|p| &p.group == g)
                    .map(|p| (pick(&p.baseline), pick(&p.avatar)))
                    .collect();
                (g.clone(), v)
            })
            .collect()
    };
    let d95 = metric_table("d95", &pairs(|r| r.d95_value))?;
    let displacement = metric_table("total_displacement", &pairs(|r| r.total_displacement))?;
    let of_experiment = |s: &&SessionMeta| !completed.is_empty() && s.experiment_id == completed[0].experiment_id;
    Ok(ProteusReport {
        n_joined: corpus.sessions.iter().filter(of_experiment).count(),
        n_dropped: corpus
            .sessions
            .iter()
            .filter(of_experiment)
            .filter(|s| s.status == SessionStatus::Dropped)
            .count(),
        participants,
        d95,
        displacement,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittsReport {
    pub n_trials: usize,
    pub n_outliers: usize,
    pub fence: OutlierFence,
    pub models: Vec<ModelFit>,
}

pub fn pointing_trials(corpus: &Corpus, form: IdForm) -> Result<Vec<PointingTrial>> {
    let keep = corpus.analysable();
    let mut out = Vec::new();
    for (_, ts) in by_session(&corpus.trials, keep.as_ref()) {
        for t in ts {
            let Some(mt) = number(&t.measures, MOVEMENT_TIME) else {
                continue;
            };
            let g: Vec<f64> = GEOMETRY
                .iter()
                .map(|k| number(&t.measures, k))
                .collect::<Option<_>>()
                .ok_or_else(|| AnalysisError::Input(format!("trial {} of {} lacks geometry", t.trial_index, t.session_id)))?;
            out.push(PointingTrial {
                features: fitts_features_with([g[0], g[1], g[2]], [g[3], g[4], g[5]], g[6], form)?,
                movement_time_ms: mt,
            });
        }
    }
    Ok(out)
}

pub fn fitts_report(corpus: &Corpus, form: IdForm, exec: Exec) -> Result<FittsReport> {
    let trials = pointing_trials(corpus, form)?;
    fitts_report_from(&trials, exec)
}

pub fn fitts_report_from(trials: &[PointingTrial], exec: Exec) -> Result<FittsReport> {
    let (kept, fence) = remove_outliers(trials)?;
    let models = exec
        .map(&FittsModel::ALL, |m| fit_model(*m, &kept))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(FittsReport {
        n_trials: trials.len(),
        n_outliers: trials.len() - kept.len(),
        fence,
        models,
    })
}
