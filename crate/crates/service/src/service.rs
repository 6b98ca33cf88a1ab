use std::path::Path;
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use prefnet::dataset::{translate_score, Corpus, PairPlan};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, ServiceError};
use crate::intake::parse_intake;
use crate::log::{read_events, Event, EventLog};
use crate::state::{AnswerAck, NextPair, State};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub subject_id: String,
    pub questionnaire_id: String,
    pub total: usize,
    pub next: NextPair,
}

/// Durable collection service: every write is validated, appended to the
/// event log and synced, then applied to the in-memory state, all under one
/// writer lock. Reads only take the state's read lock.
pub struct Service {
    state: RwLock<State>,
    log: Mutex<EventLog>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl Service {
    /// Opens the log at `log_path` and replays it. A new log records the plan
    /// returned by `plan` as its first event; an existing log keeps the plan
    /// it was started with and `plan` is not called.
    pub fn open(log_path: &Path, plan: impl FnOnce() -> Result<PairPlan>) -> Result<Self> {
        let (mut log, events) = EventLog::open(log_path)?;
        let state = if events.is_empty() {
            let plan = match plan() {
                Ok(p) => p,
                Err(e) => {
                    drop(log);
                    if std::fs::metadata(log_path).is_ok_and(|m| m.len() == 0) {
                        let _ = std::fs::remove_file(log_path);
                    }
                    return Err(e);
                }
            };
            let state = State::new(plan.clone())?;
            log.append(&Event::Plan { plan })?;
            state
        } else {
            State::from_events(&events).map_err(|e| ServiceError::Log {
                path: log_path.display().to_string(),
                detail: format!("replay failed: {e}"),
            })?
        };
        Ok(Service { state: RwLock::new(state), log: Mutex::new(log) })
    }

    fn commit(&self, log: &mut EventLog, event: Event) -> Result<()> {
        log.append(&event)?;
        self.state.write().expect("state lock poisoned").apply(&event)
    }

    pub fn create_session(&self, payload: &Value) -> Result<SessionCreated> {
        let intake = parse_intake(payload)?;
        let mut log = self.log.lock().expect("log lock poisoned");
        let session_id = uuid::Uuid::new_v4().simple().to_string();
        let (event, subject_id) = {
            let state = self.state.read().expect("state lock poisoned");
            let subject_id = intake.subject_id.clone().unwrap_or_else(|| format!("subject-{}", &session_id[..12]));
            if state.sessions.values().any(|s| s.subject.subject_id == subject_id) {
                return Err(ServiceError::Conflict(format!("subject {subject_id} already has a session")));
            }
            let mut subject = intake.subject;
            subject.subject_id = subject_id.clone();
            subject.validate()?;
            let event = Event::SessionCreated {
                session_id: session_id.clone(),
                subject,
                questionnaire_id: state.least_assigned().to_string(),
                created_at: now_ms(),
            };
            (event, subject_id)
        };
        self.commit(&mut log, event)?;
        drop(log);
        let next = self.next_pair(&session_id)?;
        let state = self.state.read().expect("state lock poisoned");
        let session = state.session(&session_id)?;
        Ok(SessionCreated {
            session_id: session_id.clone(),
            subject_id,
            questionnaire_id: session.questionnaire_id.clone(),
            total: session.pair_queue.len(),
            next,
        })
    }

    pub fn next_pair(&self, session_id: &str) -> Result<NextPair> {
        self.state.read().expect("state lock poisoned").next_pair(session_id)
    }

    pub fn submit_answer(&self, session_id: &str, pair_id: &str, raw_score: i64) -> Result<AnswerAck> {
        let mut log = self.log.lock().expect("log lock poisoned");
        let raw = self.state.read().expect("state lock poisoned").check_answer(session_id, pair_id, raw_score)?;
        let event = Event::AnswerSubmitted {
            session_id: session_id.to_string(),
            pair_id: pair_id.to_string(),
            raw_score: raw,
            answered_at: now_ms(),
        };
        self.commit(&mut log, event)?;
        let state = self.state.read().expect("state lock poisoned");
        let s = state.session(session_id)?;
        Ok(AnswerAck {
            session_id: session_id.to_string(),
            pair_id: pair_id.to_string(),
            raw_score: raw,
            translated_score: translate_score(raw)?,
            answered: s.answered.len(),
            done: s.is_done(),
        })
    }

    /// Exports the corpus stored in an existing log without opening it for
    /// writing, so a running service is not disturbed.
    pub fn export_log(log_path: &Path) -> Result<Corpus> {
        if !log_path.is_file() {
            return Err(ServiceError::invalid(format!("no event log at {}", log_path.display()), vec!["log".into()]));
        }
        let events = read_events(log_path)?;
        if events.is_empty() {
            return Ok(Corpus::default());
        }
        State::from_events(&events)?.export()
    }

    pub fn export(&self) -> Result<Corpus> {
        self.state.read().expect("state lock poisoned").export()
    }

    pub fn plan(&self) -> PairPlan {
        self.state.read().expect("state lock poisoned").plan.clone()
    }

    /// Sessions per questionnaire, in plan order.
    pub fn assignment_counts(&self) -> Vec<(String, usize)> {
        let state = self.state.read().expect("state lock poisoned");
        state.assignments.iter().map(|(k, &v)| (k.clone(), v)).collect()
    }
}
