//! Subjects, preference records and the JSONL corpus format.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::{Error, Result};

/// Encoding for any missing numeric subject field.
pub const MISSING: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectInfo {
    pub subject_id: String,
    pub age: f64,
    /// 0 male, 1 female, -1 unknown.
    pub gender: i8,
    pub impedance: f64,
    pub freq_low: f64,
    pub freq_high: f64,
    pub sensitivity: f64,
    #[serde(default)]
    pub equipment_label: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl SubjectInfo {
    pub fn new(subject_id: impl Into<String>, age: f64, gender: i8) -> Self {
        SubjectInfo {
            subject_id: subject_id.into(),
            age,
            gender,
            impedance: MISSING,
            freq_low: MISSING,
            freq_high: MISSING,
            sensitivity: MISSING,
            equipment_label: String::new(),
            extra: Map::new(),
        }
    }

    pub fn with_specs(mut self, impedance: f64, freq_low: f64, freq_high: f64, sensitivity: f64) -> Self {
        self.impedance = impedance;
        self.freq_low = freq_low;
        self.freq_high = freq_high;
        self.sensitivity = sensitivity;
        self
    }

    /// The four equipment specs in feature order.
    pub fn specs(&self) -> [f64; 4] {
        [self.impedance, self.freq_low, self.freq_high, self.sensitivity]
    }

    pub fn missing_specs(&self) -> usize {
        self.specs().iter().filter(|&&v| v == MISSING).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.subject_id.is_empty() {
            return Err(Error::Validation("subject_id is empty".into()));
        }
        if !self.age.is_finite() || self.age < 0.0 {
            return Err(Error::Validation(format!("subject {}: age {} must be non-negative", self.subject_id, self.age)));
        }
        if !matches!(self.gender, -1..=1) {
            return Err(Error::Validation(format!("subject {}: gender {} not in {{0, 1, -1}}", self.subject_id, self.gender)));
        }
        for (name, v) in ["impedance", "freq_low", "freq_high", "sensitivity"].iter().zip(self.specs()) {
            if !v.is_finite() || (v < 0.0 && v != MISSING) {
                return Err(Error::Validation(format!(
                    "subject {}: {name} {v} must be non-negative or -1 (missing)",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Volume {
    Max,
    Normal,
}

impl Volume {
    pub const ALL: [Volume; 2] = [Volume::Max, Volume::Normal];

    pub fn as_str(self) -> &'static str {
        match self {
            Volume::Max => "max",
            Volume::Normal => "normal",
        }
    }
}

impl fmt::Display for Volume {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Volume {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Volume::Max),
            "normal" => Ok(Volume::Normal),
            other => Err(Error::Validation(format!("volume `{other}` is not `max` or `normal`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub record_id: String,
    pub subject_id: String,
    pub song_id: String,
    pub volume: Volume,
    pub clip_a_id: String,
    pub clip_b_id: String,
    /// 1 strongly prefers A .. 5 strongly prefers B.
    pub raw_score: i32,
    pub translated_score: i32,
    pub questionnaire_id: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl PreferenceRecord {
    pub fn validate(&self) -> Result<()> {
        let expected = super::translate_score(self.raw_score)
            .map_err(|_| Error::Validation(format!("record {}: raw_score {} not in 1..=5", self.record_id, self.raw_score)))?;
        if self.translated_score != expected {
            return Err(Error::Validation(format!(
                "record {}: translated_score {} != raw_score - 3 = {expected}",
                self.record_id, self.translated_score
            )));
        }
        if self.clip_a_id == self.clip_b_id {
            return Err(Error::Validation(format!("record {}: both clips are `{}`", self.record_id, self.clip_a_id)));
        }
        Ok(())
    }
}

/// A full collection of subjects and their answers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub subjects: Vec<SubjectInfo>,
    pub records: Vec<PreferenceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Subject(SubjectInfo),
    Record(PreferenceRecord),
}

impl Corpus {
    pub fn subject(&self, id: &str) -> Option<&SubjectInfo> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    /// Subjects first, then records, one JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.subjects {
            out.push_str(&serde_json::to_string(&Line::Subject(s.clone()))?);
            out.push('\n');
        }
        for r in &self.records {
            out.push_str(&serde_json::to_string(&Line::Record(r.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses and validates JSONL; errors carry the 1-based line number.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut corpus = Corpus::default();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::Parse { line: line_no, detail: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, detail: e.to_string() })?;
            let checked = match &parsed {
                Line::Subject(s) => s.validate(),
                Line::Record(r) => r.validate(),
            };
            checked.map_err(|e| Error::Parse { line: line_no, detail: e.to_string() })?;
            match parsed {
                Line::Subject(s) => corpus.subjects.push(s),
                Line::Record(r) => corpus.records.push(r),
            }
        }
        Ok(corpus)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::from_reader(text.as_bytes())
    }
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_reader(BufReader::new(f)).map_err(|e| match e {
        Error::Parse { line, detail } => Error::Parse { line, detail: format!("{}: {detail}", path.display()) },
        other => other,
    })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    crate::fsutil::atomic_write(path, corpus.to_jsonl()?.as_bytes())
}
