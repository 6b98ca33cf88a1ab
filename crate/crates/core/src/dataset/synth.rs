//! Synthetic listening-test corpus with known ground truth.
//!
//! Each device has a quality rank (controls high-frequency rolloff and
//! added noise) and a bass-tilt rank (low-shelf boost). In `agnostic` mode
//! every subject prefers higher quality. In `personal` mode subjects fall
//! into two equal taste clusters: cluster 0 prefers quality, cluster 1
//! prefers bass tilt. With five devices the tilt ranking disagrees with the
//! quality ranking on exactly 5 of the 10 device pairs, so a predictor that
//! ignores the subject can be right on at most 75% of a balanced corpus.
//! The cluster is visible through headphone impedance.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_pairs, translate_score, Corpus, PairPlan, PreferenceRecord, SubjectInfo, Volume};
use crate::dsp::{write_wav, AudioClip, SOURCE_RATE};
use crate::{Error, Result};

/// Tilt rank of each quality-ranked device when there are five devices.
const TILT_RANKS_5: [usize; 5] = [3, 1, 0, 4, 2];
const PARTIALS: usize = 48;
const BASS_PARTIALS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Agnostic,
    Personal,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agnostic" => Ok(LabelMode::Agnostic),
            "personal" => Ok(LabelMode::Personal),
            other => Err(Error::Validation(format!("mode `{other}` is not `agnostic` or `personal`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_songs: usize,
    pub n_devices: usize,
    pub mode: LabelMode,
    pub seed: u64,
    pub volumes: Vec<Volume>,
    /// Probability that a label's direction is flipped.
    pub flip_prob: f64,
    pub clip_secs: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 12,
            n_songs: 7,
            n_devices: 5,
            mode: LabelMode::Personal,
            seed: 0,
            volumes: vec![Volume::Normal],
            flip_prob: 0.0,
            clip_secs: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_songs == 0 || self.volumes.is_empty() {
            return Err(Error::Validation("need at least one subject, song and volume".into()));
        }
        if self.n_devices < 2 {
            return Err(Error::Validation("need at least 2 devices".into()));
        }
        if self.mode == LabelMode::Personal && self.n_devices != TILT_RANKS_5.len() {
            return Err(Error::Validation(format!(
                "personal mode is defined for exactly {} devices",
                TILT_RANKS_5.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Validation(format!("flip_prob {} not in [0, 1]", self.flip_prob)));
        }
        if !(1.0..=60.0).contains(&self.clip_secs) {
            return Err(Error::Validation(format!("clip_secs {} not in [1, 60]", self.clip_secs)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub quality_rank: Vec<usize>,
    pub tilt_rank: Vec<usize>,
    pub subject_cluster: IndexMap<String, usize>,
}

impl SynthTruth {
    /// Ground-truth utility of `device` for a subject in `cluster`.
    pub fn utility(&self, mode: LabelMode, cluster: usize, device: usize) -> usize {
        match (mode, cluster) {
            (LabelMode::Personal, 1) => self.tilt_rank[device],
            _ => self.quality_rank[device],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub corpus: Corpus,
    /// Clips at 44.1 kHz; `source_id` is the clip id without extension.
    pub clips: Vec<AudioClip>,
    pub plan: PairPlan,
    pub truth: SynthTruth,
}

pub fn clip_id(song: usize, device: usize, volume: Volume) -> String {
    format!("s{song:02}__d{device}__{volume}.wav")
}

fn device_of(clip_id: &str) -> Option<usize> {
    clip_id.split("__").nth(1)?.strip_prefix('d')?.parse().ok()
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

struct Partial {
    freq: f64,
    amp: f64,
    phase: f64,
    /// Tremolo rate in Hz; gives the clip some temporal structure.
    mod_rate: f64,
}

fn song_partials(rng: &mut ChaCha8Rng) -> Vec<Partial> {
    (0..PARTIALS)
        .map(|i| {
            let (lo, hi) = if i < BASS_PARTIALS { (60.0f64, 300.0f64) } else { (300.0, 15_000.0) };
            let freq = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
            Partial {
                freq,
                amp: 10f64.powf(-rng.gen_range(0.0..20.0) / 20.0),
                phase: rng.gen_range(0.0..2.0 * PI),
                mod_rate: rng.gen_range(0.5..4.0),
            }
        })
        .collect()
}

fn device_gain(freq: f64, quality: f64, tilt_db: f64) -> f64 {
    let cutoff = 2000.0 * 7f64.powf(quality);
    let lowpass = 1.0 / (1.0 + (freq / cutoff).powi(4)).sqrt();
    let shelf = 10f64.powf(tilt_db / 20.0 / (1.0 + (freq / 300.0).powi(2)));
    lowpass * shelf
}

fn render_clip(
    partials: &[Partial],
    quality: f64,
    tilt_db: f64,
    peak: f64,
    n: usize,
    noise_rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let rate = SOURCE_RATE as f64;
    let mut x = vec![0.0f64; n];
    for p in partials {
        let g = p.amp * device_gain(p.freq, quality, tilt_db);
        let w = 2.0 * PI * p.freq / rate;
        let wm = 2.0 * PI * p.mod_rate / rate;
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64;
            *v += g * (0.75 + 0.25 * (wm * t).sin()) * (w * t + p.phase).sin();
        }
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let noise_std = 0.02 * (1.0 - quality) + 0.001;
    for v in x.iter_mut() {
        *v = *v / rms * 0.1 + noise_std * (noise_rng.gen::<f64>() * 2.0 - 1.0) * 3f64.sqrt();
    }
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    x.iter().map(|v| (v / max * peak) as f32).collect()
}

/// Builds the corpus, audio and ground truth; bit-identical for a given
/// configuration.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let nd = cfg.n_devices;
    let quality_rank: Vec<usize> = (0..nd).collect();
    let tilt_rank: Vec<usize> = if nd == TILT_RANKS_5.len() {
        TILT_RANKS_5.to_vec()
    } else {
        (0..nd).map(|d| (d + nd / 2) % nd).collect()
    };

    let n_samples = (cfg.clip_secs * SOURCE_RATE as f64).round() as usize;
    let mut clips = Vec::new();
    let mut groups: IndexMap<(String, Volume), Vec<String>> = IndexMap::new();
    for song in 0..cfg.n_songs {
        let partials = song_partials(&mut sub_rng(cfg.seed, 1 + song as u64));
        for &volume in &cfg.volumes {
            let peak = match volume {
                Volume::Max => 0.9,
                Volume::Normal => 0.5,
            };
            let mut ids = Vec::with_capacity(nd);
            for d in 0..nd {
                let quality = quality_rank[d] as f64 / (nd - 1) as f64;
                let tilt_db = 3.0 * tilt_rank[d] as f64;
                let stream = 1_000_000 + (song * 16 + d) as u64 * 4 + volume as u64;
                let samples = render_clip(&partials, quality, tilt_db, peak, n_samples, &mut sub_rng(cfg.seed, stream));
                let id = clip_id(song, d, volume);
                clips.push(AudioClip::new(samples, SOURCE_RATE, id.trim_end_matches(".wav"))?);
                ids.push(id);
            }
            groups.insert((format!("s{song:02}"), volume), ids);
        }
    }

    let mut rng = sub_rng(cfg.seed, 0);
    let plan = build_pairs(&groups, nd, &mut rng)?;
    let q_of: HashMap<&str, &str> = plan
        .questionnaires
        .iter()
        .flat_map(|q| q.pair_ids.iter().map(move |p| (p.as_str(), q.questionnaire_id.as_str())))
        .collect();

    let mut clusters: Vec<usize> = (0..cfg.n_subjects).map(|i| usize::from(i >= cfg.n_subjects.div_ceil(2))).collect();
    clusters.shuffle(&mut rng);
    let mut corpus = Corpus::default();
    let mut subject_cluster = IndexMap::new();
    for (i, &cluster) in clusters.iter().enumerate() {
        let id = format!("subj{i:02}");
        let impedance = if cluster == 0 { rng.gen_range(16.0..40.0) } else { rng.gen_range(150.0..300.0) };
        let mut s = SubjectInfo::new(&id, rng.gen_range(18..=65) as f64, rng.gen_range(0..=1)).with_specs(
            f64::round(impedance),
            rng.gen_range(5..=20) as f64,
            rng.gen_range(20..=40) as f64 * 1000.0,
            rng.gen_range(95..=115) as f64,
        );
        s.equipment_label = format!("synthetic headphone {i}");
        corpus.subjects.push(s);
        subject_cluster.insert(id, cluster);
    }
    let truth = SynthTruth { quality_rank, tilt_rank, subject_cluster };

    for s in &corpus.subjects {
        let cluster = truth.subject_cluster[&s.subject_id];
        for p in &plan.pairs {
            let da = device_of(&p.clip_a_id).expect("generated clip id");
            let db = device_of(&p.clip_b_id).expect("generated clip id");
            let ua = truth.utility(cfg.mode, cluster, da) as i32;
            let ub = truth.utility(cfg.mode, cluster, db) as i32;
            let diff = ub - ua;
            let mut translated = diff.signum() * if diff.abs() >= 2 { 2 } else { 1 };
            if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
                translated = -translated;
            }
            let raw_score = translated + 3;
            corpus.records.push(PreferenceRecord {
                record_id: format!("{}-{}", s.subject_id, p.pair_id),
                subject_id: s.subject_id.clone(),
                song_id: p.song_id.clone(),
                volume: p.volume,
                clip_a_id: p.clip_a_id.clone(),
                clip_b_id: p.clip_b_id.clone(),
                raw_score,
                translated_score: translate_score(raw_score)?,
                questionnaire_id: q_of[p.pair_id.as_str()].to_string(),
                extra: Default::default(),
            });
        }
    }
    Ok(SynthCorpus { config: cfg.clone(), corpus, clips, plan, truth })
}

/// Best accuracy any predictor that sees only the two clips can reach on
/// `records`: for each unordered clip pair, the majority direction.
pub fn subject_blind_ceiling(records: &[PreferenceRecord]) -> f64 {
    let mut counts: HashMap<(&str, &str), [usize; 2]> = HashMap::new();
    let mut total = 0;
    for r in records {
        if r.translated_score == 0 {
            continue;
        }
        let (key, first_wins) = if r.clip_a_id <= r.clip_b_id {
            ((r.clip_a_id.as_str(), r.clip_b_id.as_str()), r.translated_score < 0)
        } else {
            ((r.clip_b_id.as_str(), r.clip_a_id.as_str()), r.translated_score > 0)
        };
        counts.entry(key).or_default()[usize::from(first_wins)] += 1;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    counts.values().map(|c| c[0].max(c[1])).sum::<usize>() as f64 / total as f64
}

/// Paths written by [`write_synth`].
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub audio_dir: PathBuf,
    pub corpus: PathBuf,
    pub truth: PathBuf,
    pub pairs: PathBuf,
}

/// `audio/*.wav`, `corpus.jsonl`, `truth.json` and `pairs.json` under `dir`.
pub fn write_synth(dir: &Path, synth: &SynthCorpus) -> Result<SynthPaths> {
    let audio_dir = dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    for clip in &synth.clips {
        write_wav(&audio_dir.join(format!("{}.wav", clip.source_id)), clip)?;
    }
    let corpus = dir.join("corpus.jsonl");
    super::write_corpus(&corpus, &synth.corpus)?;
    let truth = dir.join("truth.json");
    crate::fsutil::atomic_write(&truth, serde_json::to_string_pretty(&synth.truth)?.as_bytes())?;
    let pairs = dir.join("pairs.json");
    crate::fsutil::atomic_write(&pairs, serde_json::to_string_pretty(&synth.plan)?.as_bytes())?;
    Ok(SynthPaths { audio_dir, corpus, truth, pairs })
}
