//! Append-only store for tracking frames, trial records, questionnaire
//! responses and session metadata, keyed by anonymized identifiers.

mod anon;
mod disk;
pub mod export;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

pub use anon::{mint_anon_id, AnonId, IdMinter, ParseAnonIdError};
pub use export::{ExportFormat, ExportKind};

use crate::questionnaire::ResponseSet;
use crate::trial::{Phase, TrialParams};
use crate::value::Scalar;
use disk::DiskLog;

pub const MAX_FRAME_BATCH: usize = 1000;
pub const RETRY_AFTER_MS: u64 = 100;
const QUATERNION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    /// Unit quaternion `(x, y, z, w)`.
    pub rotation: [f64; 4],
}

impl Pose {
    pub fn at(position: [f64; 3]) -> Self {
        Pose {
            position,
            rotation: [0.0, 0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingFrame {
    pub session_id: String,
    pub frame_index: u64,
    pub t: f64,
    pub poses: BTreeMap<String, Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub session_id: String,
    pub trial_index: usize,
    #[serde(default = "main_phase")]
    pub phase: Phase,
    #[serde(default)]
    pub params: TrialParams,
    #[serde(default)]
    pub measures: BTreeMap<String, Scalar>,
    pub t_start: f64,
    pub t_end: f64,
}

fn main_phase() -> Phase {
    Phase::Main
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Completed,
    Dropped,
}

impl SessionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Active => "active",
            SessionStatus::Completed => "completed",
            SessionStatus::Dropped => "dropped",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "active" => SessionStatus::Active,
            "completed" => SessionStatus::Completed,
            "dropped" => SessionStatus::Dropped,
            _ => return None,
        })
    }
}

/// Exportable session metadata. Holds only anonymized identifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub experiment_id: String,
    pub participant: AnonId,
    #[serde(default)]
    pub group: Option<String>,
    pub status: SessionStatus,
    pub world_id: String,
    pub instance_id: String,
    #[serde(default)]
    pub tracking_rate_hz: Option<f64>,
    pub trials_planned: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataError {
    #[error("session `{0}` is unknown")]
    UnknownSession(String),
    #[error("session `{0}` already exists")]
    DuplicateSession(String),
    #[error("session `{0}` is no longer active")]
    SessionClosed(String),
    #[error("batch of {size} frames exceeds the limit of {limit}; retry after {retry_after_ms} ms")]
    BatchTooLarge {
        size: usize,
        limit: usize,
        retry_after_ms: u64,
    },
    #[error("batch mixes frames from several sessions")]
    MixedSessions,
    #[error("frame indices in batch are not strictly increasing at position {0}")]
    NonMonotone(usize),
    #[error("frame {frame}: {reason}")]
    InvalidFrame { frame: u64, reason: String },
    #[error("trial index {index} outside plan of {planned} trials")]
    TrialOutOfRange { index: usize, planned: usize },
    #[error("trial {0} already recorded")]
    DuplicateTrial(usize),
    #[error("questionnaire `{0}` already answered in this session")]
    DuplicateResponse(String),
    #[error("unknown export {0}")]
    UnknownExport(String),
    #[error("malformed import: {0}")]
    Import(String),
    #[error("storage i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameAck {
    /// Frames newly stored by this call.
    pub stored: usize,
    /// Frames at or below the last stored index, dropped.
    pub dropped: usize,
}

#[derive(Debug)]
struct SessionData {
    meta: SessionMeta,
    frames: Vec<TrackingFrame>,
    trials: BTreeMap<usize, TrialRecord>,
    responses: BTreeMap<String, ResponseSet>,
    gaps: u64,
}

#[derive(Debug, Default)]
struct Index {
    order: Vec<String>,
    sessions: HashMap<String, Arc<Mutex<SessionData>>>,
}

/// Consistent per-session copy taken for export.
#[derive(Debug, Clone)]
pub struct SessionSnapshot {
    pub meta: SessionMeta,
    pub frames: Vec<TrackingFrame>,
    pub trials: Vec<TrialRecord>,
    pub responses: Vec<ResponseSet>,
}

/// In-memory index with an optional append-only on-disk log.
#[derive(Debug, Default)]
pub struct DataStore {
    index: RwLock<Index>,
    disk: Option<DiskLog>,
}

impl DataStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Store that also appends every accepted record under `dir`.
    pub fn with_dir(dir: impl AsRef<Path>) -> Result<Self, DataError> {
        Ok(DataStore {
            index: RwLock::default(),
            disk: Some(DiskLog::open(dir.as_ref())?),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionData>>, DataError> {
        self.index
            .read()
            .sessions
            .get(id)
            .cloned()
            .ok_or_else(|| DataError::UnknownSession(id.to_string()))
    }

    pub fn open_session(&self, meta: SessionMeta) -> Result<(), DataError> {
        let mut index = self.index.write();
        if index.sessions.contains_key(&meta.session_id) {
            return Err(DataError::DuplicateSession(meta.session_id));
        }
        if let Some(disk) = &self.disk {
            disk.append_session(&meta)?;
        }
        index.order.push(meta.session_id.clone());
        index.sessions.insert(
            meta.session_id.clone(),
            Arc::new(Mutex::new(SessionData {
                meta,
                frames: Vec::new(),
                trials: BTreeMap::new(),
                responses: BTreeMap::new(),
                gaps: 0,
            })),
        );
        Ok(())
    }

    /// Updates mutable metadata (status, world, instance, rate). Each update
    /// is appended to the session log; nothing already stored is rewritten.
    pub fn update_session(
        &self,
        id: &str,
        update: impl FnOnce(&mut SessionMeta),
    ) -> Result<SessionMeta, DataError> {
        let session = self.session(id)?;
        let mut s = session.lock();
        let mut meta = s.meta.clone();
        update(&mut meta);
        meta.session_id = s.meta.session_id.clone();
        meta.experiment_id = s.meta.experiment_id.clone();
        meta.participant = s.meta.participant;
        if let Some(disk) = &self.disk {
            disk.append_session(&meta)?;
        }
        s.meta = meta.clone();
        Ok(meta)
    }

    pub fn session_meta(&self, id: &str) -> Result<SessionMeta, DataError> {
        Ok(self.session(id)?.lock().meta.clone())
    }

    pub fn ingest_frames(&self, batch: &[TrackingFrame]) -> Result<FrameAck, DataError> {
        let Some(first) = batch.first() else {
            return Ok(FrameAck::default());
        };
        if batch.len() > MAX_FRAME_BATCH {
            return Err(DataError::BatchTooLarge {
                size: batch.len(),
                limit: MAX_FRAME_BATCH,
                retry_after_ms: RETRY_AFTER_MS,
            });
        }
        for (i, f) in batch.iter().enumerate() {
            if f.session_id != first.session_id {
                return Err(DataError::MixedSessions);
            }
            if i > 0 && f.frame_index <= batch[i - 1].frame_index {
                return Err(DataError::NonMonotone(i));
            }
            validate_frame(f)?;
        }

        let session = self.session(&first.session_id)?;
        let mut s = session.lock();
        if s.meta.status != SessionStatus::Active {
            return Err(DataError::SessionClosed(first.session_id.clone()));
        }
        let last = s.frames.last().map(|f| f.frame_index);
        let fresh: Vec<&TrackingFrame> = batch
            .iter()
            .filter(|f| last.is_none_or(|l| f.frame_index > l))
            .collect();
        let dropped = batch.len() - fresh.len();
        if dropped > 0 {
            debug!(session = %first.session_id, dropped, "dropped already-stored frames");
        }
        if let Some(f) = fresh.first() {
            let expected = last.map_or(0, |l| l + 1);
            let mut gaps = u64::from(f.frame_index != expected);
            gaps += fresh
                .windows(2)
                .filter(|w| w[1].frame_index != w[0].frame_index + 1)
                .count() as u64;
            if gaps > 0 {
                warn!(session = %first.session_id, gaps, "frame index gaps in batch");
                s.gaps += gaps;
            }
        }
        if let Some(disk) = &self.disk {
            disk.append_frames(&first.session_id, fresh.iter().copied())?;
        }
        let stored = fresh.len();
        s.frames.extend(fresh.into_iter().cloned());
        Ok(FrameAck { stored, dropped })
    }

    pub fn ingest_trial(&self, record: TrialRecord) -> Result<(), DataError> {
        let session = self.session(&record.session_id)?;
        let mut s = session.lock();
        if s.meta.status != SessionStatus::Active {
            return Err(DataError::SessionClosed(record.session_id));
        }
        if record.trial_index >= s.meta.trials_planned {
            return Err(DataError::TrialOutOfRange {
                index: record.trial_index,
                planned: s.meta.trials_planned,
            });
        }
        if s.trials.contains_key(&record.trial_index) {
            return Err(DataError::DuplicateTrial(record.trial_index));
        }
        if let Some(disk) = &self.disk {
            disk.append_trial(&record)?;
        }
        s.trials.insert(record.trial_index, record);
        Ok(())
    }

    pub fn store_response(&self, resp: ResponseSet) -> Result<(), DataError> {
        let session = self.session(&resp.session_id)?;
        let mut s = session.lock();
        if s.meta.status != SessionStatus::Active {
            return Err(DataError::SessionClosed(resp.session_id));
        }
        if s.responses.contains_key(&resp.questionnaire_id) {
            return Err(DataError::DuplicateResponse(resp.questionnaire_id));
        }
        if let Some(disk) = &self.disk {
            disk.append_response(&resp)?;
        }
        s.responses.insert(resp.questionnaire_id.clone(), resp);
        Ok(())
    }

    pub fn has_response(&self, session_id: &str, questionnaire_id: &str) -> Result<bool, DataError> {
        Ok(self
            .session(session_id)?
            .lock()
            .responses
            .contains_key(questionnaire_id))
    }

    pub fn frame_count(&self, session_id: &str) -> Result<usize, DataError> {
        Ok(self.session(session_id)?.lock().frames.len())
    }

    pub fn gap_count(&self, session_id: &str) -> Result<u64, DataError> {
        Ok(self.session(session_id)?.lock().gaps)
    }

    pub fn trial_count(&self, session_id: &str) -> Result<usize, DataError> {
        Ok(self.session(session_id)?.lock().trials.len())
    }

    /// SHA-256 over the first `upto` stored frames (all when `None`).
    pub fn frames_checksum(&self, session_id: &str, upto: Option<usize>) -> Result<String, DataError> {
        let session = self.session(session_id)?;
        let s = session.lock();
        let n = upto.unwrap_or(s.frames.len()).min(s.frames.len());
        let mut hasher = Sha256::new();
        for f in &s.frames[..n] {
            hasher.update(serde_json::to_vec(f).expect("frames serialize"));
            hasher.update(b"\n");
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn snapshot(&self, session_id: &str) -> Result<SessionSnapshot, DataError> {
        let session = self.session(session_id)?;
        let s = session.lock();
        Ok(SessionSnapshot {
            meta: s.meta.clone(),
            frames: s.frames.clone(),
            trials: s.trials.values().cloned().collect(),
            responses: s.responses.values().cloned().collect(),
        })
    }

    /// Snapshots of an experiment's sessions, in creation order.
    pub fn snapshots(&self, experiment_id: &str) -> Vec<SessionSnapshot> {
        let handles: Vec<Arc<Mutex<SessionData>>> = {
            let index = self.index.read();
            index
                .order
                .iter()
                .filter_map(|id| index.sessions.get(id).cloned())
                .collect()
        };
        handles
            .iter()
            .filter_map(|h| {
                let s = h.lock();
                (s.meta.experiment_id == experiment_id).then(|| SessionSnapshot {
                    meta: s.meta.clone(),
                    frames: s.frames.clone(),
                    trials: s.trials.values().cloned().collect(),
                    responses: s.responses.values().cloned().collect(),
                })
            })
            .collect()
    }

    pub fn sessions_of(&self, experiment_id: &str) -> Vec<SessionMeta> {
        let index = self.index.read();
        index
            .order
            .iter()
            .filter_map(|id| index.sessions.get(id))
            .map(|h| h.lock().meta.clone())
            .filter(|m| m.experiment_id == experiment_id)
            .collect()
    }

    pub fn export(
        &self,
        experiment_id: &str,
        kind: ExportKind,
        format: ExportFormat,
    ) -> Result<Vec<u8>, DataError> {
        let snaps = self.snapshots(experiment_id);
        export::write_snapshots(&snaps, kind, format)
    }
}

fn validate_frame(f: &TrackingFrame) -> Result<(), DataError> {
    let bad = |reason: String| DataError::InvalidFrame {
        frame: f.frame_index,
        reason,
    };
    if !f.t.is_finite() {
        return Err(bad("non-finite timestamp".into()));
    }
    if f.poses.is_empty() {
        return Err(bad("no tracked poses".into()));
    }
    for (name, p) in &f.poses {
        if name.is_empty() {
            return Err(bad("empty tracker name".into()));
        }
        if p.position.iter().chain(&p.rotation).any(|v| !v.is_finite()) {
            return Err(bad(format!("{name}: non-finite pose")));
        }
        let norm = p.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > QUATERNION_TOLERANCE {
            return Err(bad(format!("{name}: rotation norm {norm} is not unit")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: &str, planned: usize) -> SessionMeta {
        SessionMeta {
            session_id: id.into(),
            experiment_id: "exp".into(),
            participant: mint_anon_id(),
            group: None,
            status: SessionStatus::Active,
            world_id: "w".into(),
            instance_id: "i".into(),
            tracking_rate_hz: Some(72.0),
            trials_planned: planned,
        }
    }

    fn frame(session: &str, i: u64) -> TrackingFrame {
        TrackingFrame {
            session_id: session.into(),
            frame_index: i,
            t: i as f64 / 72.0,
            poses: BTreeMap::from([
                ("head".to_string(), Pose::at([0.0, 1.6, 0.0])),
                ("left_hand".to_string(), Pose::at([-0.2, 1.0, 0.3])),
                ("right_hand".to_string(), Pose::at([0.2, 1.0, 0.3])),
            ]),
        }
    }

    fn trial(session: &str, i: usize) -> TrialRecord {
        TrialRecord {
            session_id: session.into(),
            trial_index: i,
            phase: Phase::Main,
            params: TrialParams::new(),
            measures: BTreeMap::new(),
            t_start: 0.0,
            t_end: 1.0,
        }
    }

    #[test]
    fn four_minutes_at_72_hz() {
        let store = DataStore::in_memory();
        store.open_session(meta("s", 0)).unwrap();
        let total = 240 * 72;
        let frames: Vec<_> = (0..total as u64).map(|i| frame("s", i)).collect();
        for chunk in frames.chunks(MAX_FRAME_BATCH) {
            store.ingest_frames(chunk).unwrap();
        }
        assert_eq!(store.frame_count("s").unwrap(), 17_280);
        assert_eq!(store.gap_count("s").unwrap(), 0);
    }

    #[test]
    fn resent_batch_is_idempotent() {
        let store = DataStore::in_memory();
        store.open_session(meta("s", 0)).unwrap();
        let batch: Vec<_> = (0..10).map(|i| frame("s", i)).collect();
        assert_eq!(store.ingest_frames(&batch).unwrap().stored, 10);
        let again = store.ingest_frames(&batch).unwrap();
        assert_eq!(again, FrameAck { stored: 0, dropped: 10 });
        assert_eq!(store.frame_count("s").unwrap(), 10);
    }

    #[test]
    fn frames_after_completion_rejected() {
        let store = DataStore::in_memory();
        store.open_session(meta("s", 0)).unwrap();
        store
            .update_session("s", |m| m.status = SessionStatus::Completed)
            .unwrap();
        assert_eq!(
            store.ingest_frames(&[frame("s", 0)]),
            Err(DataError::SessionClosed("s".into()))
        );
    }

    #[test]
    fn batch_rules() {
        let store = DataStore::in_memory();
        store.open_session(meta("s", 0)).unwrap();
        store.open_session(meta("t", 0)).unwrap();
        assert_eq!(
            store.ingest_frames(&[frame("s", 1), frame("s", 1)]),
            Err(DataError::NonMonotone(1))
        );
        assert_eq!(
            store.ingest_frames(&[frame("s", 1), frame("t", 2)]),
            Err(DataError::MixedSessions)
        );
        assert_eq!(
            store.ingest_frames(&[frame("x", 0)]),
            Err(DataError::UnknownSession("x".into()))
        );
        let big: Vec<_> = (0..1001).map(|i| frame("s", i)).collect();
        assert!(matches!(
            store.ingest_frames(&big),
            Err(DataError::BatchTooLarge { limit: 1000, .. })
        ));
        let mut skewed = frame("s", 0);
        skewed.poses.get_mut("head").unwrap().rotation = [0.0, 0.0, 0.0, 1.01];
        assert!(matches!(
            store.ingest_frames(&[skewed]),
            Err(DataError::InvalidFrame { .. })
        ));
        assert_eq!(store.frame_count("s").unwrap(), 0);
    }

    #[test]
    fn gaps_are_counted_not_rejected() {
        let store = DataStore::in_memory();
        store.open_session(meta("s", 0)).unwrap();
        store.ingest_frames(&[frame("s", 0), frame("s", 2)]).unwrap();
        store.ingest_frames(&[frame("s", 5)]).unwrap();
        assert_eq!(store.gap_count("s").unwrap(), 2);
        assert_eq!(store.frame_count("s").unwrap(), 3);
    }

    #[test]
    fn trial_rules() {
        let store = DataStore::in_memory();
        store.open_session(meta("s", 22)).unwrap();
        for i in 0..22 {
            store.ingest_trial(trial("s", i)).unwrap();
        }
        assert_eq!(store.trial_count("s").unwrap(), 22);
        assert_eq!(
            store.ingest_trial(trial("s", 3)),
            Err(DataError::DuplicateTrial(3))
        );
        assert_eq!(
            store.ingest_trial(trial("s", 100)),
            Err(DataError::TrialOutOfRange {
                index: 100,
                planned: 22
            })
        );
    }

    #[test]
    fn checksum_of_prefix_is_stable() {
        let store = DataStore::in_memory();
        store.open_session(meta("s", 0)).unwrap();
        let frames: Vec<_> = (0..50).map(|i| frame("s", i)).collect();
        store.ingest_frames(&frames[..20]).unwrap();
        let early = store.frames_checksum("s", None).unwrap();
        store.ingest_frames(&frames[10..]).unwrap();
        assert_eq!(store.frames_checksum("s", Some(20)).unwrap(), early);
        assert_ne!(store.frames_checksum("s", None).unwrap(), early);
    }

    #[test]
    fn disk_log_receives_appends() {
        let dir = tempfile::tempdir().unwrap();
        let store = DataStore::with_dir(dir.path()).unwrap();
        store.open_session(meta("s", 2)).unwrap();
        store
            .ingest_frames(&(0..5).map(|i| frame("s", i)).collect::<Vec<_>>())
            .unwrap();
        store.ingest_trial(trial("s", 0)).unwrap();
        let frames = std::fs::read_to_string(dir.path().join("frames").join("s.ndjson")).unwrap();
        assert_eq!(frames.lines().count(), 5);
        let trials = std::fs::read_to_string(dir.path().join("trials.ndjson")).unwrap();
        assert_eq!(trials.lines().count(), 1);
    }
}
