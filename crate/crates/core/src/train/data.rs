use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::augment::{apply_stripes, sample_rng, sample_stripes, AugmentConfig};
use crate::dataset::TrainingExample;
use crate::dsp::{logmel, read_features, resample_to_32k, AudioClip, LogMelSpectrogram, CACHE_EXTENSION, LOG_FLOOR_DB, N_MELS};
use crate::models::batch_specs;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Clip id with any directory and extension removed, so `song1/a.wav`,
/// `a.wav` and `a` all look up the same features.
pub fn clip_key(id: &str) -> &str {
    let base = id.rsplit(['/', '\\']).next().unwrap_or(id);
    match base.rfind('.') {
        Some(i) if i > 0 => &base[..i],
        _ => base,
    }
}

/// Log-mel features keyed by [`clip_key`].
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    specs: HashMap<String, LogMelSpectrogram>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, clip_id: &str, spec: LogMelSpectrogram) {
        self.specs.insert(clip_key(clip_id).to_string(), spec);
    }

    pub fn get(&self, clip_id: &str) -> Result<&LogMelSpectrogram> {
        self.specs
            .get(clip_key(clip_id))
            .ok_or_else(|| Error::Validation(format!("no features for clip `{clip_id}`")))
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Resamples and featurizes in-memory clips, keyed by `source_id`.
    pub fn from_clips(clips: &[AudioClip]) -> Result<Self> {
        let mut store = Self::new();
        for clip in clips {
            store.insert(&clip.source_id, logmel(&resample_to_32k(clip)?)?);
        }
        Ok(store)
    }

    /// Reads every feature cache file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut store = Self::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|x| x == CACHE_EXTENSION) {
                let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                store.insert(&stem, read_features(&path)?);
            }
        }
        Ok(store)
    }

    /// Shortest clip referenced by `examples`.
    pub fn min_frames(&self, examples: &[TrainingExample]) -> Result<usize> {
        let mut min = usize::MAX;
        for ex in examples {
            min = min.min(self.get(&ex.clip_a_id)?.frames).min(self.get(&ex.clip_b_id)?.frames);
        }
        if min == usize::MAX {
            return Err(Error::InvalidArgument("no examples".into()));
        }
        Ok(min)
    }
}

/// `frames` rows of `spec` starting at `offset`, padded with the log floor
/// past the end of the clip.
pub fn window(spec: &LogMelSpectrogram, offset: usize, frames: usize) -> Vec<f32> {
    let mut out = vec![LOG_FLOOR_DB; frames * N_MELS];
    let avail = spec.frames.saturating_sub(offset).min(frames);
    out[..avail * N_MELS].copy_from_slice(&spec.values[offset * N_MELS..(offset + avail) * N_MELS]);
    out
}

/// Crop offset shared by both clips of a pair: centred for evaluation,
/// uniform for training.
pub fn pair_offset<R: Rng>(a: &LogMelSpectrogram, b: &LogMelSpectrogram, frames: usize, rng: Option<&mut R>) -> usize {
    let slack = a.frames.min(b.frames).saturating_sub(frames);
    match rng {
        Some(r) if slack > 0 => r.gen_range(0..=slack),
        _ => slack / 2,
    }
}

/// One model-ready batch of pairs.
#[derive(Debug, Clone)]
pub struct PairBatch<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub subjects: Tensor<T>,
    pub labels: Vec<usize>,
}

/// How windows are cut for a batch.
pub enum Cropping<'a, R> {
    /// Centred windows, no augmentation.
    Eval,
    /// Random windows and stripe masking; `sample_index` numbers every
    /// augmented spectrogram of the run so masks are reproducible.
    Train { rng: &'a mut R, augment: &'a AugmentConfig, seed: u64, sample_index: &'a mut u64 },
}

pub fn make_batch<T: Scalar, R: Rng>(
    store: &FeatureStore,
    examples: &[&TrainingExample],
    frames: usize,
    mut cropping: Cropping<'_, R>,
) -> Result<PairBatch<T>> {
    let mut a = Vec::with_capacity(examples.len());
    let mut b = Vec::with_capacity(examples.len());
    let mut subjects = Vec::with_capacity(examples.len() * 6);
    for ex in examples {
        let sa = store.get(&ex.clip_a_id)?;
        let sb = store.get(&ex.clip_b_id)?;
        let (wa, wb) = match &mut cropping {
            Cropping::Eval => {
                let off = pair_offset::<R>(sa, sb, frames, None);
                (window(sa, off, frames), window(sb, off, frames))
            }
            Cropping::Train { rng, augment, seed, sample_index } => {
                let off = pair_offset(sa, sb, frames, Some(&mut **rng));
                let mut wa = window(sa, off, frames);
                let mut wb = window(sb, off, frames);
                if augment.enabled {
                    for w in [&mut wa, &mut wb] {
                        let mut r = sample_rng(*seed, **sample_index);
                        **sample_index += 1;
                        let stripes = sample_stripes(frames, augment, &mut r);
                        apply_stripes(w, frames, &stripes, augment.fill_value);
                    }
                }
                (wa, wb)
            }
        };
        a.push(wa);
        b.push(wb);
        subjects.extend(ex.subject_vector.iter().map(|&v| T::from_f64_lossy(v)));
    }
    let refs_a: Vec<&[f32]> = a.iter().map(Vec::as_slice).collect();
    let refs_b: Vec<&[f32]> = b.iter().map(Vec::as_slice).collect();
    Ok(PairBatch {
        a: batch_specs(&refs_a, frames)?,
        b: batch_specs(&refs_b, frames)?,
        subjects: Tensor::new(vec![examples.len(), 6], subjects)?,
        labels: examples.iter().map(|e| e.label).collect(),
    })
}
