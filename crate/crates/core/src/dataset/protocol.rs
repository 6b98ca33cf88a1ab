use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, PreferenceRecord, SubjectInfo, Volume, MISSING};
use crate::{Error, Result};

/// 1..=5 to -2..=2.
pub fn translate_score(raw: i32) -> Result<i32> {
    if !(1..=5).contains(&raw) {
        return Err(Error::InvalidArgument(format!("raw score {raw} not in 1..=5")));
    }
    Ok(raw - 3)
}

/// One presented comparison: two devices' recordings of the same song at
/// the same volume, in the order the listener hears them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipPair {
    pub pair_id: String,
    pub song_id: String,
    pub volume: Volume,
    pub clip_a_id: String,
    pub clip_b_id: String,
    /// True when the random presentation order reversed the canonical
    /// (input) order of the two clips.
    pub swapped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub questionnaire_id: String,
    pub volume: Volume,
    pub pair_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPlan {
    pub pairs: Vec<ClipPair>,
    pub questionnaires: Vec<Questionnaire>,
}

impl PairPlan {
    pub fn pair(&self, id: &str) -> Option<&ClipPair> {
        self.pairs.iter().find(|p| p.pair_id == id)
    }
}

/// Every unordered pair of devices within each (song, volume) group, in
/// random presentation order, split per volume into questionnaires that
/// hold two pairs of every song.
///
/// Each group must contain exactly `devices` distinct clips. With 5 devices
/// this yields 10 pairs per group and 5 questionnaires per volume.
pub fn build_pairs<R: Rng>(
    groups: &IndexMap<(String, Volume), Vec<String>>,
    devices: usize,
    rng: &mut R,
) -> Result<PairPlan> {
    if devices < 2 {
        return Err(Error::InvalidArgument("need at least 2 devices per group".into()));
    }
    let mut pairs = Vec::new();
    let mut by_volume: BTreeMap<Volume, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    for ((song, volume), clips) in groups {
        let distinct: HashSet<&String> = clips.iter().collect();
        if clips.len() != devices || distinct.len() != devices {
            return Err(Error::Validation(format!(
                "song {song} volume {volume}: expected {devices} distinct clips, got {} ({} distinct)",
                clips.len(),
                distinct.len()
            )));
        }
        for i in 0..devices {
            for j in i + 1..devices {
                let swapped = rng.gen_bool(0.5);
                let (a, b) = if swapped { (&clips[j], &clips[i]) } else { (&clips[i], &clips[j]) };
                let idx = pairs.len();
                by_volume.entry(*volume).or_default().entry(song.clone()).or_default().push(idx);
                pairs.push(ClipPair {
                    pair_id: format!("{volume}-{song}-{i}{j}"),
                    song_id: song.clone(),
                    volume: *volume,
                    clip_a_id: a.clone(),
                    clip_b_id: b.clone(),
                    swapped,
                });
            }
        }
    }
    let per_song = devices * (devices - 1) / 2;
    let n_q = per_song.div_ceil(2);
    let mut questionnaires = Vec::new();
    for (volume, songs) in by_volume {
        let mut qs: Vec<Vec<String>> = vec![Vec::new(); n_q];
        for (_, mut idxs) in songs {
            idxs.shuffle(rng);
            for (k, chunk) in idxs.chunks(2).enumerate() {
                qs[k].extend(chunk.iter().map(|&i| pairs[i].pair_id.clone()));
            }
        }
        for (k, mut ids) in qs.into_iter().enumerate() {
            ids.shuffle(rng);
            questionnaires.push(Questionnaire { questionnaire_id: format!("{volume}-q{k}"), volume, pair_ids: ids });
        }
    }
    Ok(PairPlan { pairs, questionnaires })
}

/// Which subject features reach the model; masked entries become -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMask {
    #[default]
    All,
    AgeGender,
    AllSpecs,
    ImpdSensit,
    FreqResponses,
}

impl FeatureMask {
    pub const ALL: [FeatureMask; 5] = [
        FeatureMask::All,
        FeatureMask::AgeGender,
        FeatureMask::AllSpecs,
        FeatureMask::ImpdSensit,
        FeatureMask::FreqResponses,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMask::All => "all",
            FeatureMask::AgeGender => "age_gender",
            FeatureMask::AllSpecs => "all_specs",
            FeatureMask::ImpdSensit => "impd_sensit",
            FeatureMask::FreqResponses => "freq_responses",
        }
    }

    /// Which of (age, gender, impedance, freq_low, freq_high, sensitivity)
    /// are kept.
    pub fn keeps(self) -> [bool; 6] {
        match self {
            FeatureMask::All => [true; 6],
            FeatureMask::AgeGender => [true, true, false, false, false, false],
            FeatureMask::AllSpecs => [false, false, true, true, true, true],
            FeatureMask::ImpdSensit => [false, false, true, false, false, true],
            FeatureMask::FreqResponses => [false, false, false, true, true, false],
        }
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureMask::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMask(s.to_string()))
    }
}

pub const SUBJECT_DIM: usize = 6;

/// (age, gender, impedance, freq_low, freq_high, sensitivity) with masked
/// entries set to -1.
pub fn subject_vector(s: &SubjectInfo, mask: FeatureMask) -> [f64; SUBJECT_DIM] {
    let raw = [s.age, s.gender as f64, s.impedance, s.freq_low, s.freq_high, s.sensitivity];
    let keep = mask.keeps();
    std::array::from_fn(|i| if keep[i] { raw[i] } else { MISSING })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub subjects_in: usize,
    pub subjects_kept: usize,
    /// Subjects with more than 2 of the 4 equipment specs missing.
    pub excluded_subjects: Vec<String>,
    pub records_in: usize,
    pub records_kept: usize,
    pub dropped_excluded_subject: usize,
    pub dropped_no_preference: usize,
    /// Records whose subject is absent from the corpus.
    pub dropped_unknown_subject: usize,
    pub kept_strong: usize,
    pub kept_weak: usize,
}

/// Drops subjects with more than half of their equipment specs missing and
/// records that are answered "no preference" or belong to a dropped subject.
pub fn filter_corpus(corpus: &Corpus) -> (Corpus, ExclusionReport) {
    let mut report = ExclusionReport {
        subjects_in: corpus.subjects.len(),
        records_in: corpus.records.len(),
        ..Default::default()
    };
    let mut kept = Corpus::default();
    for s in &corpus.subjects {
        if s.missing_specs() > 2 {
            report.excluded_subjects.push(s.subject_id.clone());
        } else {
            kept.subjects.push(s.clone());
        }
    }
    let excluded: HashSet<&str> = report.excluded_subjects.iter().map(String::as_str).collect();
    let known: HashSet<&str> = kept.subjects.iter().map(|s| s.subject_id.as_str()).collect();
    for r in &corpus.records {
        if excluded.contains(r.subject_id.as_str()) {
            report.dropped_excluded_subject += 1;
        } else if !known.contains(r.subject_id.as_str()) {
            report.dropped_unknown_subject += 1;
        } else if r.translated_score == 0 {
            report.dropped_no_preference += 1;
        } else {
            if r.translated_score.abs() == 2 {
                report.kept_strong += 1;
            } else {
                report.kept_weak += 1;
            }
            kept.records.push(r.clone());
        }
    }
    report.subjects_kept = kept.subjects.len();
    report.records_kept = kept.records.len();
    (kept, report)
}

/// One comparison as seen by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub record_id: String,
    pub subject_id: String,
    pub clip_a_id: String,
    pub clip_b_id: String,
    pub subject_vector: [f64; SUBJECT_DIM],
    /// 0 when the first clip is preferred, 1 for the second.
    pub label: usize,
    pub weight: f64,
}

/// Converts a record; `None` for no-preference answers.
pub fn training_example(r: &PreferenceRecord, s: &SubjectInfo, mask: FeatureMask) -> Option<TrainingExample> {
    let label = match r.translated_score.signum() {
        -1 => 0,
        1 => 1,
        _ => return None,
    };
    Some(TrainingExample {
        record_id: r.record_id.clone(),
        subject_id: r.subject_id.clone(),
        clip_a_id: r.clip_a_id.clone(),
        clip_b_id: r.clip_b_id.clone(),
        subject_vector: subject_vector(s, mask),
        label,
        weight: r.translated_score.abs() as f64,
    })
}

/// Examples for all records of the given subjects (all subjects when
/// `subjects` is `None`), in corpus order.
pub fn training_examples(corpus: &Corpus, subjects: Option<&[String]>, mask: FeatureMask) -> Result<Vec<TrainingExample>> {
    let wanted: Option<HashSet<&str>> = subjects.map(|ids| ids.iter().map(String::as_str).collect());
    let mut out = Vec::new();
    for r in &corpus.records {
        if wanted.as_ref().is_some_and(|w| !w.contains(r.subject_id.as_str())) {
            continue;
        }
        let s = corpus
            .subject(&r.subject_id)
            .ok_or_else(|| Error::Validation(format!("record {} refers to unknown subject {}", r.record_id, r.subject_id)))?;
        out.extend(training_example(r, s, mask));
    }
    Ok(out)
}

pub const NUM_FOLDS: usize = 7;

/// Age-sorted contiguous split of subjects into folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub num_folds: usize,
    /// Subject ids sorted by (age, subject_id).
    pub order: Vec<String>,
    pub assignments: IndexMap<String, usize>,
}

/// Subject ids of one test/validation/train rotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rotation {
    pub test_fold: usize,
    pub val_fold: usize,
    pub test: Vec<String>,
    pub val: Vec<String>,
    pub train: Vec<String>,
}

impl FoldPlan {
    pub fn fold_members(&self, k: usize) -> Vec<String> {
        self.order.iter().filter(|id| self.assignments[*id] == k).cloned().collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.num_folds).map(|k| self.assignments.values().filter(|&&f| f == k).count()).collect()
    }

    /// Test fold `k`, validation fold `(k + 1) mod n`, training on the rest.
    pub fn rotation(&self, k: usize) -> Result<Rotation> {
        if k >= self.num_folds {
            return Err(Error::InvalidArgument(format!("fold {k} out of range 0..{}", self.num_folds)));
        }
        let val_fold = (k + 1) % self.num_folds;
        let mut r = Rotation { test_fold: k, val_fold, test: vec![], val: vec![], train: vec![] };
        for id in &self.order {
            match self.assignments[id] {
                f if f == k => r.test.push(id.clone()),
                f if f == val_fold => r.val.push(id.clone()),
                _ => r.train.push(id.clone()),
            }
        }
        Ok(r)
    }
}

/// Sorts subjects by age (ties by id) and cuts the order into `num_folds`
/// contiguous folds whose sizes differ by at most one, larger folds first.
pub fn make_folds_n(subjects: &[SubjectInfo], num_folds: usize) -> Result<FoldPlan> {
    if num_folds < 3 {
        return Err(Error::InvalidArgument("need at least 3 folds".into()));
    }
    if subjects.len() < num_folds + 1 {
        return Err(Error::Validation(format!(
            "{} subjects is too few for {num_folds} folds (need at least {})",
            subjects.len(),
            num_folds + 1
        )));
    }
    let mut sorted: Vec<&SubjectInfo> = subjects.iter().collect();
    sorted.sort_by(|a, b| a.age.total_cmp(&b.age).then_with(|| a.subject_id.cmp(&b.subject_id)));
    let base = sorted.len() / num_folds;
    let extra = sorted.len() % num_folds;
    let mut assignments = IndexMap::new();
    let mut it = sorted.iter();
    for k in 0..num_folds {
        let size = base + usize::from(k < extra);
        for s in it.by_ref().take(size) {
            if assignments.insert(s.subject_id.clone(), k).is_some() {
                return Err(Error::Validation(format!("duplicate subject id {}", s.subject_id)));
            }
        }
    }
    Ok(FoldPlan { num_folds, order: sorted.iter().map(|s| s.subject_id.clone()).collect(), assignments })
}

pub fn make_folds(subjects: &[SubjectInfo]) -> Result<FoldPlan> {
    make_folds_n(subjects, NUM_FOLDS)
}
