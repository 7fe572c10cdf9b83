//! CSV and newline-delimited JSON export/import.
//!
//! CSV follows RFC 4180 (CRLF rows, quoting only where needed). Trial
//! parameters and measures become `p:<name>` / `m:<name>` columns; empty cells
//! mean the key is absent. Numeric-looking text values come back as numbers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    AnonId, DataError, Pose, SessionMeta, SessionSnapshot, SessionStatus, TrackingFrame,
    TrialRecord,
};
use crate::questionnaire::{Answer, ResponseSet};
use crate::trial::Phase;
use crate::value::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportKind {
    Frames,
    Trials,
    Responses,
    Sessions,
}

impl ExportKind {
    pub const ALL: [ExportKind; 4] = [
        ExportKind::Frames,
        ExportKind::Trials,
        ExportKind::Responses,
        ExportKind::Sessions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExportKind::Frames => "frames",
            ExportKind::Trials => "trials",
            ExportKind::Responses => "responses",
            ExportKind::Sessions => "sessions",
        }
    }
}

impl fmt::Display for ExportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExportKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExportKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DataError::UnknownExport(format!("kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            ExportFormat::Csv => "text/csv",
            ExportFormat::Json => "application/x-ndjson",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "ndjson",
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        })
    }
}

impl FromStr for ExportFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" | "ndjson" => Ok(ExportFormat::Json),
            other => Err(DataError::UnknownExport(format!("format `{other}`"))),
        }
    }
}

pub const FRAME_COLUMNS: [&str; 11] = [
    "session", "frame", "t", "tracker", "px", "py", "pz", "qx", "qy", "qz", "qw",
];
const RESPONSE_COLUMNS: [&str; 7] = [
    "session",
    "questionnaire",
    "version",
    "item",
    "kind",
    "value",
    "submitted_at",
];
const SESSION_COLUMNS: [&str; 9] = [
    "session",
    "experiment",
    "participant",
    "group",
    "status",
    "world",
    "instance",
    "tracking_rate_hz",
    "trials_planned",
];
const TRIAL_FIXED_COLUMNS: [&str; 5] = ["session", "trial", "phase", "t_start", "t_end"];

pub(super) fn write_snapshots(
    snaps: &[SessionSnapshot],
    kind: ExportKind,
    format: ExportFormat,
) -> Result<Vec<u8>, DataError> {
    match kind {
        ExportKind::Frames => {
            let frames: Vec<&TrackingFrame> = snaps.iter().flat_map(|s| &s.frames).collect();
            write_frames(frames, format)
        }
        ExportKind::Trials => {
            let trials: Vec<&TrialRecord> = snaps.iter().flat_map(|s| &s.trials).collect();
            write_trials(trials, format)
        }
        ExportKind::Responses => {
            let resp: Vec<&ResponseSet> = snaps.iter().flat_map(|s| &s.responses).collect();
            write_responses(resp, format)
        }
        ExportKind::Sessions => write_sessions(snaps.iter().map(|s| &s.meta), format),
    }
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new())
}

fn csv_err(e: impl fmt::Display) -> DataError {
    DataError::Import(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, DataError> {
    w.into_inner().map_err(|e| DataError::Io(e.to_string()))
}

fn ndjson<'a, T: Serialize + 'a>(items: impl IntoIterator<Item = &'a T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("records serialize");
        out.push(b'\n');
    }
    out
}

fn parse_ndjson<T: DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>, DataError> {
    let text = std::str::from_utf8(bytes).map_err(csv_err)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(csv_err))
        .collect()
}

fn csv_rows(bytes: &[u8]) -> Result<(Vec<String>, Vec<csv::StringRecord>), DataError> {
    let mut r = csv::ReaderBuilder::new().from_reader(bytes);
    let header = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r.records().collect::<Result<Vec<_>, _>>().map_err(csv_err)?;
    Ok((header, rows))
}

fn num<T: FromStr>(cell: &str, what: &str) -> Result<T, DataError> {
    cell.parse()
        .map_err(|_| DataError::Import(format!("bad {what} `{cell}`")))
}

fn phase_str(p: Phase) -> &'static str {
    match p {
        Phase::Practice => "practice",
        Phase::Main => "main",
    }
}

pub fn write_frames<'a>(
    frames: impl IntoIterator<Item = &'a TrackingFrame>,
    format: ExportFormat,
) -> Result<Vec<u8>, DataError> {
    match format {
        ExportFormat::Json => Ok(ndjson(frames)),
        ExportFormat::Csv => {
            let mut w = csv_writer();
            w.write_record(FRAME_COLUMNS).map_err(csv_err)?;
            for f in frames {
                for (tracker, p) in &f.poses {
                    let mut row = vec![
                        f.session_id.clone(),
                        f.frame_index.to_string(),
                        f.t.to_string(),
                        tracker.clone(),
                    ];
                    row.extend(p.position.iter().chain(&p.rotation).map(f64::to_string));
                    w.write_record(&row).map_err(csv_err)?;
                }
            }
            finish(w)
        }
    }
}

pub fn read_frames(bytes: &[u8], format: ExportFormat) -> Result<Vec<TrackingFrame>, DataError> {
    if format == ExportFormat::Json {
        return parse_ndjson(bytes);
    }
    let (header, rows) = csv_rows(bytes)?;
    if header != FRAME_COLUMNS {
        return Err(DataError::Import("unexpected frame columns".into()));
    }
    let mut out: Vec<TrackingFrame> = Vec::new();
    for row in rows {
        let session = &row[0];
        let frame_index: u64 = num(&row[1], "frame")?;
        let t: f64 = num(&row[2], "t")?;
        let v: Vec<f64> = (4..11)
            .map(|i| num(&row[i], FRAME_COLUMNS[i]))
            .collect::<Result<_, _>>()?;
        let pose = Pose {
            position: [v[0], v[1], v[2]],
            rotation: [v[3], v[4], v[5], v[6]],
        };
        match out.last_mut() {
            Some(last) if last.session_id == session && last.frame_index == frame_index => {
                last.poses.insert(row[3].to_string(), pose);
            }
            _ => out.push(TrackingFrame {
                session_id: session.to_string(),
                frame_index,
                t,
                poses: BTreeMap::from([(row[3].to_string(), pose)]),
            }),
        }
    }
    Ok(out)
}

pub fn write_trials<'a>(
    trials: impl IntoIterator<Item = &'a TrialRecord>,
    format: ExportFormat,
) -> Result<Vec<u8>, DataError> {
    let trials: Vec<&TrialRecord> = trials.into_iter().collect();
    if format == ExportFormat::Json {
        return Ok(ndjson(trials));
    }
    let params: BTreeSet<&str> = trials
        .iter()
        .flat_map(|t| t.params.keys().map(String::as_str))
        .collect();
    let measures: BTreeSet<&str> = trials
        .iter()
        .flat_map(|t| t.measures.keys().map(String::as_str))
        .collect();
    let mut w = csv_writer();
    let header: Vec<String> = TRIAL_FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(params.iter().map(|p| format!("p:{p}")))
        .chain(measures.iter().map(|m| format!("m:{m}")))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for t in trials {
        let mut row = vec![
            t.session_id.clone(),
            t.trial_index.to_string(),
            phase_str(t.phase).to_string(),
            t.t_start.to_string(),
            t.t_end.to_string(),
        ];
        row.extend(
            params
                .iter()
                .map(|p| t.params.get(*p).map(Scalar::to_cell).unwrap_or_default()),
        );
        row.extend(
            measures
                .iter()
                .map(|m| t.measures.get(*m).map(Scalar::to_cell).unwrap_or_default()),
        );
        w.write_record(&row).map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_trials(bytes: &[u8], format: ExportFormat) -> Result<Vec<TrialRecord>, DataError> {
    if format == ExportFormat::Json {
        return parse_ndjson(bytes);
    }
    let (header, rows) = csv_rows(bytes)?;
    if header.len() < TRIAL_FIXED_COLUMNS.len() || header[..5] != TRIAL_FIXED_COLUMNS {
        return Err(DataError::Import("unexpected trial columns".into()));
    }
    rows.iter()
        .map(|row| {
            let mut rec = TrialRecord {
                session_id: row[0].to_string(),
                trial_index: num(&row[1], "trial")?,
                phase: match &row[2] {
                    "practice" => Phase::Practice,
                    "main" => Phase::Main,
                    other => return Err(DataError::Import(format!("bad phase `{other}`"))),
                },
                params: BTreeMap::new(),
                measures: BTreeMap::new(),
                t_start: num(&row[3], "t_start")?,
                t_end: num(&row[4], "t_end")?,
            };
            for (col, cell) in header.iter().zip(row.iter()).skip(5) {
                if cell.is_empty() {
                    continue;
                }
                if let Some(name) = col.strip_prefix("p:") {
                    rec.params.insert(name.to_string(), Scalar::from_cell(cell));
                } else if let Some(name) = col.strip_prefix("m:") {
                    rec.measures.insert(name.to_string(), Scalar::from_cell(cell));
                }
            }
            Ok(rec)
        })
        .collect()
}

pub fn write_responses<'a>(
    responses: impl IntoIterator<Item = &'a ResponseSet>,
    format: ExportFormat,
) -> Result<Vec<u8>, DataError> {
    if format == ExportFormat::Json {
        return Ok(ndjson(responses));
    }
    let mut w = csv_writer();
    w.write_record(RESPONSE_COLUMNS).map_err(csv_err)?;
    for r in responses {
        for (item, a) in r.answers.iter().enumerate() {
            w.write_record([
                r.session_id.clone(),
                r.questionnaire_id.clone(),
                r.version.to_string(),
                item.to_string(),
                a.kind().to_string(),
                a.value_cell(),
                r.submitted_at.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    finish(w)
}

pub fn read_responses(bytes: &[u8], format: ExportFormat) -> Result<Vec<ResponseSet>, DataError> {
    if format == ExportFormat::Json {
        return parse_ndjson(bytes);
    }
    let (header, rows) = csv_rows(bytes)?;
    if header != RESPONSE_COLUMNS {
        return Err(DataError::Import("unexpected response columns".into()));
    }
    let mut out: Vec<ResponseSet> = Vec::new();
    for row in rows {
        let answer = Answer::from_cells(&row[4], &row[5])
            .ok_or_else(|| DataError::Import(format!("bad answer `{}`", &row[5])))?;
        let item: usize = num(&row[3], "item")?;
        match out.last_mut() {
            Some(last)
                if last.session_id == row[0]
                    && last.questionnaire_id == row[1]
                    && item == last.answers.len() =>
            {
                last.answers.push(answer)
            }
            _ => out.push(ResponseSet {
                session_id: row[0].to_string(),
                questionnaire_id: row[1].to_string(),
                version: num(&row[2], "version")?,
                answers: vec![answer],
                submitted_at: num(&row[6], "submitted_at")?,
            }),
        }
    }
    Ok(out)
}

pub fn write_sessions<'a>(
    sessions: impl IntoIterator<Item = &'a SessionMeta>,
    format: ExportFormat,
) -> Result<Vec<u8>, DataError> {
    if format == ExportFormat::Json {
        return Ok(ndjson(sessions));
    }
    let mut w = csv_writer();
    w.write_record(SESSION_COLUMNS).map_err(csv_err)?;
    for m in sessions {
        w.write_record([
            m.session_id.clone(),
            m.experiment_id.clone(),
            m.participant.to_string(),
            m.group.clone().unwrap_or_default(),
            m.status.as_str().to_string(),
            m.world_id.clone(),
            m.instance_id.clone(),
            m.tracking_rate_hz.map(|r| r.to_string()).unwrap_or_default(),
            m.trials_planned.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_sessions(bytes: &[u8], format: ExportFormat) -> Result<Vec<SessionMeta>, DataError> {
    if format == ExportFormat::Json {
        return parse_ndjson(bytes);
    }
    let (header, rows) = csv_rows(bytes)?;
    if header != SESSION_COLUMNS {
        return Err(DataError::Import("unexpected session columns".into()));
    }
    rows.iter()
        .map(|row| {
            Ok(SessionMeta {
                session_id: row[0].to_string(),
                experiment_id: row[1].to_string(),
                participant: row[2]
                    .parse::<AnonId>()
                    .map_err(|e| DataError::Import(e.to_string()))?,
                group: (!row[3].is_empty()).then(|| row[3].to_string()),
                status: SessionStatus::parse(&row[4])
                    .ok_or_else(|| DataError::Import(format!("bad status `{}`", &row[4])))?,
                world_id: row[5].to_string(),
                instance_id: row[6].to_string(),
                tracking_rate_hz: if row[7].is_empty() {
                    None
                } else {
                    Some(num(&row[7], "tracking_rate_hz")?)
                },
                trials_planned: num(&row[8], "trials_planned")?,
            })
        })
        .collect()
}

/// Parses an export and writes it again; byte-identical output means the
/// import reproduced every record.
pub fn reexport(bytes: &[u8], kind: ExportKind, format: ExportFormat) -> Result<Vec<u8>, DataError> {
    match kind {
        ExportKind::Frames => write_frames(&read_frames(bytes, format)?, format),
        ExportKind::Trials => write_trials(&read_trials(bytes, format)?, format),
        ExportKind::Responses => write_responses(&read_responses(bytes, format)?, format),
        ExportKind::Sessions => write_sessions(&read_sessions(bytes, format)?, format),
    }
}
