//! SpecAugment-style stripe masking for training spectrograms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{LogMelSpectrogram, LOG_FLOOR_DB, N_MELS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub stripes_per_axis: usize,
    pub max_time_width: usize,
    pub max_freq_width: usize,
    pub fill_value: f32,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            stripes_per_axis: 2,
            max_time_width: 64,
            max_freq_width: 4,
            fill_value: LOG_FLOOR_DB,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_freq_width > N_MELS {
            return Err(Error::Validation(format!("max_freq_width {} exceeds {N_MELS}", self.max_freq_width)));
        }
        if self.max_time_width < 1 {
            return Err(Error::Validation("max_time_width must be at least 1".into()));
        }
        if !self.fill_value.is_finite() {
            return Err(Error::Validation("fill_value must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Time,
    Freq,
}

/// A masked band `[start, start + width)` along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stripe {
    pub axis: Axis,
    pub start: usize,
    pub width: usize,
}

/// Generator owned by one training sample.
pub fn sample_rng(global_seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(sample_index);
    rng
}

/// Draws time stripes then frequency stripes for a `frames × 64` input.
/// Widths are uniform over `0..=max` (time widths clamped to `frames`),
/// starts uniform over every offset that keeps the stripe inside.
pub fn sample_stripes<R: Rng>(frames: usize, cfg: &AugmentConfig, rng: &mut R) -> Vec<Stripe> {
    if !cfg.enabled {
        return Vec::new();
    }
    let mut stripes = Vec::with_capacity(2 * cfg.stripes_per_axis);
    for (axis, max, extent) in [
        (Axis::Time, cfg.max_time_width, frames),
        (Axis::Freq, cfg.max_freq_width, N_MELS),
    ] {
        for _ in 0..cfg.stripes_per_axis {
            let width = rng.gen_range(0..=max).min(extent);
            let start = rng.gen_range(0..=extent - width);
            stripes.push(Stripe { axis, start, width });
        }
    }
    stripes
}

/// Fills the stripes in a row-major `frames × 64` buffer.
pub fn apply_stripes(values: &mut [f32], frames: usize, stripes: &[Stripe], fill: f32) {
    for s in stripes {
        match s.axis {
            Axis::Time => values[s.start * N_MELS..(s.start + s.width) * N_MELS].fill(fill),
            Axis::Freq => (0..frames).for_each(|t| values[t * N_MELS + s.start..t * N_MELS + s.start + s.width].fill(fill)),
        }
    }
}

/// Masked copy of `spec`; the input is left untouched.
pub fn spec_augment<R: Rng>(spec: &LogMelSpectrogram, cfg: &AugmentConfig, rng: &mut R) -> LogMelSpectrogram {
    let mut out = spec.clone();
    let stripes = sample_stripes(spec.frames, cfg, rng);
    apply_stripes(&mut out.values, out.frames, &stripes, cfg.fill_value);
    out
}
