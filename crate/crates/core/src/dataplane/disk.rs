use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::Serialize;

use super::{DataError, SessionMeta, TrackingFrame, TrialRecord};
use crate::questionnaire::ResponseSet;

/// Layout under the storage root:
///
/// ```text
/// sessions.ndjson         one line per metadata change
/// trials.ndjson
/// responses.ndjson
/// frames/<session>.ndjson
/// ```
#[derive(Debug)]
pub(super) struct DiskLog {
    root: PathBuf,
    sessions: Mutex<File>,
    trials: Mutex<File>,
    responses: Mutex<File>,
}

fn io(e: std::io::Error) -> DataError {
    DataError::Io(e.to_string())
}

fn append_file(path: &Path) -> Result<File, DataError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io)
}

fn write_line<T: Serialize>(file: &Mutex<File>, value: &T) -> Result<(), DataError> {
    let mut line = serde_json::to_vec(value).map_err(|e| DataError::Io(e.to_string()))?;
    line.push(b'\n');
    file.lock().write_all(&line).map_err(io)
}

impl DiskLog {
    pub(super) fn open(root: &Path) -> Result<Self, DataError> {
        fs::create_dir_all(root.join("frames")).map_err(io)?;
        Ok(DiskLog {
            root: root.to_path_buf(),
            sessions: Mutex::new(append_file(&root.join("sessions.ndjson"))?),
            trials: Mutex::new(append_file(&root.join("trials.ndjson"))?),
            responses: Mutex::new(append_file(&root.join("responses.ndjson"))?),
        })
    }

    pub(super) fn append_session(&self, meta: &SessionMeta) -> Result<(), DataError> {
        write_line(&self.sessions, meta)
    }

    pub(super) fn append_trial(&self, record: &TrialRecord) -> Result<(), DataError> {
        write_line(&self.trials, record)
    }

    pub(super) fn append_response(&self, resp: &ResponseSet) -> Result<(), DataError> {
        write_line(&self.responses, resp)
    }

    /// Callers hold the session lock, so one writer per frame file.
    pub(super) fn append_frames<'a>(
        &self,
        session_id: &str,
        frames: impl Iterator<Item = &'a TrackingFrame>,
    ) -> Result<(), DataError> {
        let path = self.root.join("frames").join(format!("{session_id}.ndjson"));
        let mut out = BufWriter::new(append_file(&path)?);
        for f in frames {
            serde_json::to_writer(&mut out, f).map_err(|e| DataError::Io(e.to_string()))?;
            out.write_all(b"\n").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}
