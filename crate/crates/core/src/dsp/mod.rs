//! Audio front end: WAV ingest, resampling to 32 kHz and 64-bin log-mel
//! spectrograms.

mod cache;
mod mel;
mod resample;
mod stft;
mod wav;

use std::path::{Path, PathBuf};

pub use cache::{config_hash, read_features, write_features, CACHE_EXTENSION};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz};
pub use resample::{resample_to_32k, resampled_len};
pub use stft::{hann_window, stft_power, stft_power_frames};
pub use wav::{load_wav, write_wav};

use crate::{Error, Result};

pub const TARGET_RATE: u32 = 32_000;
pub const SOURCE_RATE: u32 = 44_100;
pub const N_FFT: usize = 1024;
pub const HOP: usize = 320;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 64;
pub const FMIN: f64 = 50.0;
pub const FMAX: f64 = 14_000.0;
/// Power floor before the log; silence maps to exactly -100 dB.
pub const POWER_FLOOR: f64 = 1e-10;
pub const LOG_FLOOR_DB: f32 = -100.0;
pub const FRAME_RATE: f32 = TARGET_RATE as f32 / HOP as f32;

/// Mono audio with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioClip {
    /// Rejects non-finite or out-of-range samples.
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::Validation(format!(
                "sample {i} is {} (expected a finite value in [-1, 1])",
                samples[i]
            )));
        }
        Ok(AudioClip { samples, sample_rate, source_id: source_id.into() })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// `frames × 64` log-power matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub frames: usize,
    pub values: Vec<f32>,
    pub frame_rate: f32,
    pub config_hash: u64,
}

impl LogMelSpectrogram {
    pub fn new(frames: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * N_MELS {
            return Err(Error::shape(
                "logmel",
                format!("{} values for {frames} frames of {N_MELS} bins", values.len()),
            ));
        }
        Ok(LogMelSpectrogram { frames, values, frame_rate: FRAME_RATE, config_hash: config_hash() })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn get(&self, t: usize, m: usize) -> f32 {
        self.values[t * N_MELS + m]
    }
}

/// Number of STFT frames for `n` samples.
pub fn frame_count(n: usize) -> usize {
    1 + n / HOP
}

/// Log-mel values in double precision, `frames × 64` row-major.
pub fn logmel_f64(clip: &AudioClip) -> Result<(usize, Vec<f64>)> {
    if clip.sample_rate != TARGET_RATE {
        return Err(Error::InvalidArgument(format!(
            "logmel expects {TARGET_RATE} Hz audio, got {} Hz; resample first",
            clip.sample_rate
        )));
    }
    let samples: Vec<f64> = clip.samples.iter().map(|&s| s as f64).collect();
    let power = stft_power(&samples)?;
    let frames = power.len() / N_BINS;
    let fb = mel_filterbank();
    let mut out = vec![0.0; frames * N_MELS];
    for t in 0..frames {
        let p = &power[t * N_BINS..(t + 1) * N_BINS];
        for m in 0..N_MELS {
            let row = &fb[m * N_BINS..(m + 1) * N_BINS];
            let e: f64 = row.iter().zip(p).map(|(w, x)| w * x).sum();
            out[t * N_MELS + m] = 10.0 * e.max(POWER_FLOOR).log10();
        }
    }
    Ok((frames, out))
}

/// 64-bin log-mel spectrogram of a 32 kHz clip.
pub fn logmel(clip: &AudioClip) -> Result<LogMelSpectrogram> {
    let (frames, values) = logmel_f64(clip)?;
    LogMelSpectrogram::new(frames, values.into_iter().map(|v| (v as f32).max(LOG_FLOOR_DB)).collect())
}

/// WAV file to log-mel features, resampling when needed.
pub fn featurize_file(path: &Path) -> Result<LogMelSpectrogram> {
    let clip = load_wav(path)?;
    let clip = resample_to_32k(&clip)?;
    logmel(&clip)
}

/// Featurizes every `*.wav` in `input` (non-recursive, sorted by name) into
/// `<stem>.lmel` files under `output`. Returns the written paths.
pub fn featurize_dir(input: &Path, output: &Path) -> Result<Vec<PathBuf>> {
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let mut written = Vec::with_capacity(wavs.len());
    for wav in wavs {
        let spec = featurize_file(&wav)?;
        let stem = wav.file_stem().unwrap_or_default().to_string_lossy();
        let dest = output.join(format!("{stem}.{CACHE_EXTENSION}"));
        write_features(&dest, &spec)?;
        written.push(dest);
    }
    Ok(written)
}
