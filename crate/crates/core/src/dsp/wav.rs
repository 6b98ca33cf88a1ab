use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::{Error, Result};

const MIN_SECS: f64 = 1.0;
const MAX_SECS: f64 = 60.0;

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::format("riff header", format!("{}: {msg}", path.display())),
        hound::Error::Unsupported => Error::format("codec", format!("{}: unsupported WAV encoding", path.display())),
        other => Error::format("wav", format!("{}: {other}", path.display())),
    }
}

/// Reads 16-bit PCM or 32-bit float WAV, downmixing to mono by channel mean.
/// The clip's `source_id` is the file stem.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::format("channels", "zero channels"));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| hound_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| hound_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::format(
                "bits_per_sample",
                format!("{}: {bits}-bit {fmt:?} is not supported (16-bit int or 32-bit float)", path.display()),
            ))
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().sum::<f32>() / channels as f32).clamp(-1.0, 1.0))
        .collect();
    let source_id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let clip = AudioClip::new(mono, spec.sample_rate, source_id)?;
    let secs = clip.duration_secs();
    if !(MIN_SECS..=MAX_SECS).contains(&secs) {
        return Err(Error::Validation(format!(
            "{}: duration {secs:.3} s outside [{MIN_SECS}, {MAX_SECS}] s",
            path.display()
        )));
    }
    Ok(clip)
}

/// Writes a mono 16-bit PCM WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in &clip.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| hound_err(path, e))?;
    }
    w.finalize().map_err(|e| hound_err(path, e))
}
