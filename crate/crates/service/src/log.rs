//! Append-only JSONL event log. Every event is flushed and synced before
//! the request that produced it is acknowledged; on startup the log is
//! replayed to rebuild the in-memory state.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use prefnet::dataset::{PairPlan, SubjectInfo};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// The pair plan the log's sessions refer to; always the first event.
    Plan { plan: PairPlan },
    SessionCreated { session_id: String, subject: SubjectInfo, questionnaire_id: String, created_at: u64 },
    AnswerSubmitted { session_id: String, pair_id: String, raw_score: i32, answered_at: u64 },
}

/// Complete events in the log at `path` and the byte length they span. A
/// torn final line is ignored; a malformed line elsewhere is an error.
fn scan(path: &Path) -> Result<(Vec<Event>, u64)> {
    let mut events = Vec::new();
    let mut good_len = 0u64;
    let reader = BufReader::new(File::open(path).map_err(|e| log_err(path, e))?);
    let mut lines = reader.split(b'\n').peekable();
    let mut line_no = 0;
    while let Some(line) = lines.next() {
        line_no += 1;
        let line = line.map_err(|e| log_err(path, e))?;
        let is_last = lines.peek().is_none();
        if line.iter().all(u8::is_ascii_whitespace) {
            good_len += line.len() as u64 + 1;
            continue;
        }
        match serde_json::from_slice::<Event>(&line) {
            Ok(ev) => {
                events.push(ev);
                good_len += line.len() as u64 + 1;
            }
            Err(_) if is_last => break,
            Err(e) => return Err(log_err(path, format!("line {line_no}: {e}"))),
        }
    }
    Ok((events, good_len))
}

/// Reads the events of an existing log without modifying it.
pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    Ok(scan(path)?.0)
}

pub struct EventLog {
    path: PathBuf,
    file: File,
}

fn log_err(path: &Path, detail: impl ToString) -> ServiceError {
    ServiceError::Log { path: path.display().to_string(), detail: detail.to_string() }
}

impl EventLog {
    /// Opens (creating if needed) the log and returns it with every complete
    /// event already stored. A torn final line, left by a crash before its
    /// write was acknowledged, is truncated away.
    pub fn open(path: &Path) -> Result<(Self, Vec<Event>)> {
        let (events, good_len) = if path.exists() { scan(path)? } else { (Vec::new(), 0) };
        let file = OpenOptions::new().create(true).read(true).append(true).open(path).map_err(|e| log_err(path, e))?;
        let len = file.metadata().map_err(|e| log_err(path, e))?.len();
        if len > good_len {
            file.set_len(good_len).map_err(|e| log_err(path, e))?;
        }
        if good_len > 0 && len < good_len {
            // last complete event lacked its newline
            let mut f = &file;
            f.write_all(b"\n").map_err(|e| log_err(path, e))?;
        }
        Ok((EventLog { path: path.to_path_buf(), file }, events))
    }

    /// Appends one event and syncs it to disk.
    pub fn append(&mut self, event: &Event) -> Result<()> {
        let mut line = serde_json::to_vec(event).map_err(|e| log_err(&self.path, e))?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| log_err(&self.path, e))?;
        self.file.sync_data().map_err(|e| log_err(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
