use std::collections::HashMap;

use indexmap::IndexMap;
use prefnet::dataset::{translate_score, ClipPair, Corpus, PairPlan, PreferenceRecord, SubjectInfo, Volume};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, ServiceError};
use crate::log::Event;

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub subject: SubjectInfo,
    pub questionnaire_id: String,
    pub pair_queue: Vec<String>,
    /// pair id → raw score, in answer order.
    pub answered: IndexMap<String, i32>,
    pub created_at: u64,
}

impl Session {
    pub fn current_pair(&self) -> Option<&str> {
        self.pair_queue.iter().find(|p| !self.answered.contains_key(*p)).map(String::as_str)
    }

    pub fn is_done(&self) -> bool {
        self.answered.len() == self.pair_queue.len()
    }
}

/// What a client needs to present one comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDescriptor {
    pub pair_id: String,
    pub clip_a_url: String,
    pub clip_b_url: String,
    pub song_id: String,
    pub volume: Volume,
    /// Whether the presentation order reverses the canonical device order.
    pub swapped: bool,
}

impl PairDescriptor {
    fn new(p: &ClipPair) -> Self {
        PairDescriptor {
            pair_id: p.pair_id.clone(),
            clip_a_url: format!("/audio/{}", p.clip_a_id),
            clip_b_url: format!("/audio/{}", p.clip_b_id),
            song_id: p.song_id.clone(),
            volume: p.volume,
            swapped: p.swapped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextPair {
    pub session_id: String,
    pub done: bool,
    /// 1-based position of `pair` in the questionnaire.
    pub position: usize,
    pub answered: usize,
    pub total: usize,
    pub pair: Option<PairDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerAck {
    pub session_id: String,
    pub pair_id: String,
    pub raw_score: i32,
    pub translated_score: i32,
    pub answered: usize,
    pub done: bool,
}

/// Sessions rebuilt from, and kept in step with, the event log.
#[derive(Debug, Clone)]
pub struct State {
    pub plan: PairPlan,
    pairs: HashMap<String, ClipPair>,
    pub sessions: IndexMap<String, Session>,
    /// Sessions assigned to each questionnaire, in plan order.
    pub assignments: IndexMap<String, usize>,
}

impl State {
    pub fn new(plan: PairPlan) -> Result<Self> {
        if plan.questionnaires.is_empty() {
            return Err(ServiceError::invalid("pair plan has no questionnaires", vec![]));
        }
        let pairs: HashMap<String, ClipPair> = plan.pairs.iter().map(|p| (p.pair_id.clone(), p.clone())).collect();
        for q in &plan.questionnaires {
            if let Some(missing) = q.pair_ids.iter().find(|id| !pairs.contains_key(*id)) {
                return Err(ServiceError::invalid(
                    format!("questionnaire {} refers to unknown pair {missing}", q.questionnaire_id),
                    vec![],
                ));
            }
        }
        let assignments = plan.questionnaires.iter().map(|q| (q.questionnaire_id.clone(), 0)).collect();
        Ok(State { plan, pairs, sessions: IndexMap::new(), assignments })
    }

    /// Replays a whole log; the first event must be the plan.
    pub fn from_events(events: &[Event]) -> Result<Self> {
        let mut state = match events.first() {
            Some(Event::Plan { plan }) => State::new(plan.clone())?,
            _ => return Err(ServiceError::Conflict("event log does not start with a pair plan".into())),
        };
        for ev in events {
            state.apply(ev)?;
        }
        Ok(state)
    }

    /// Questionnaire with the fewest sessions, earliest in plan order on ties.
    pub fn least_assigned(&self) -> &str {
        let (id, _) = self
            .assignments
            .iter()
            .min_by_key(|(_, &n)| n)
            .expect("plan has questionnaires");
        id
    }

    pub fn session(&self, id: &str) -> Result<&Session> {
        self.sessions.get(id).ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    /// Applies a logged event. Events are validated before they are logged,
    /// so failures here mean the log does not belong to this plan.
    pub fn apply(&mut self, event: &Event) -> Result<()> {
        match event {
            Event::Plan { plan } => {
                if *plan != self.plan {
                    return Err(ServiceError::Conflict("event log was written for a different pair plan".into()));
                }
            }
            Event::SessionCreated { session_id, subject, questionnaire_id, created_at } => {
                let q = self
                    .plan
                    .questionnaires
                    .iter()
                    .find(|q| &q.questionnaire_id == questionnaire_id)
                    .ok_or_else(|| ServiceError::Conflict(format!("unknown questionnaire {questionnaire_id} in log")))?;
                self.sessions.insert(
                    session_id.clone(),
                    Session {
                        session_id: session_id.clone(),
                        subject: subject.clone(),
                        questionnaire_id: questionnaire_id.clone(),
                        pair_queue: q.pair_ids.clone(),
                        answered: IndexMap::new(),
                        created_at: *created_at,
                    },
                );
                *self.assignments.get_mut(questionnaire_id).expect("questionnaire exists") += 1;
            }
            Event::AnswerSubmitted { session_id, pair_id, raw_score, .. } => {
                let s = self
                    .sessions
                    .get_mut(session_id)
                    .ok_or_else(|| ServiceError::UnknownSession(session_id.clone()))?;
                s.answered.insert(pair_id.clone(), *raw_score);
            }
        }
        Ok(())
    }

    pub fn next_pair(&self, session_id: &str) -> Result<NextPair> {
        let s = self.session(session_id)?;
        let current = s.current_pair();
        Ok(NextPair {
            session_id: session_id.to_string(),
            done: current.is_none(),
            position: (s.answered.len() + 1).min(s.pair_queue.len()),
            answered: s.answered.len(),
            total: s.pair_queue.len(),
            pair: current.map(|id| PairDescriptor::new(&self.pairs[id])),
        })
    }

    /// Checks an answer against the session without changing anything.
    pub fn check_answer(&self, session_id: &str, pair_id: &str, raw_score: i64) -> Result<i32> {
        let s = self.session(session_id)?;
        if !(1..=5).contains(&raw_score) {
            return Err(ServiceError::invalid(format!("raw_score {raw_score} is not in 1..=5"), vec!["raw_score".into()]));
        }
        if !s.pair_queue.iter().any(|p| p == pair_id) {
            return Err(ServiceError::invalid(
                format!("pair {pair_id} is not part of questionnaire {}", s.questionnaire_id),
                vec!["pair_id".into()],
            ));
        }
        if s.answered.contains_key(pair_id) {
            return Err(ServiceError::Conflict(format!("pair {pair_id} was already answered")));
        }
        let current = s.current_pair().expect("an unanswered pair exists");
        if current != pair_id {
            return Err(ServiceError::Conflict(format!("pair {pair_id} is not the current pair (expected {current})")));
        }
        Ok(raw_score as i32)
    }

    /// All subjects and answered records, in log order.
    pub fn export(&self) -> Result<Corpus> {
        let mut corpus = Corpus::default();
        for s in self.sessions.values() {
            corpus.subjects.push(s.subject.clone());
            for (pair_id, &raw) in &s.answered {
                let p = &self.pairs[pair_id];
                let mut extra = serde_json::Map::new();
                extra.insert("session_id".into(), Value::String(s.session_id.clone()));
                corpus.records.push(PreferenceRecord {
                    record_id: format!("{}-{pair_id}", s.session_id),
                    subject_id: s.subject.subject_id.clone(),
                    song_id: p.song_id.clone(),
                    volume: p.volume,
                    clip_a_id: p.clip_a_id.clone(),
                    clip_b_id: p.clip_b_id.clone(),
                    raw_score: raw,
                    translated_score: translate_score(raw)?,
                    questionnaire_id: s.questionnaire_id.clone(),
                    extra,
                });
            }
        }
        Ok(corpus)
    }
}
