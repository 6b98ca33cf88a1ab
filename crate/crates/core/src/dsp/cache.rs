//! Feature cache file (little-endian):
//!
//! ```text
//! "LMEL" | version u32 | frames u32 | bins u32 | frame_rate f32 | config_hash u64 | f32 × frames × bins
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{LogMelSpectrogram, FMAX, FMIN, HOP, N_FFT, N_MELS, POWER_FLOOR, TARGET_RATE};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"LMEL";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 8;
pub const CACHE_EXTENSION: &str = "lmel";

/// Identifies the DSP parameters behind a feature file: the first eight
/// bytes of a SHA-256 over their canonical description.
pub fn config_hash() -> u64 {
    let desc = format!(
        "rate={TARGET_RATE};n_fft={N_FFT};hop={HOP};window=hann-periodic;pad=reflect;\
         mels={N_MELS};fmin={FMIN};fmax={FMAX};mel=htk;norm=peak;log=db;floor={POWER_FLOOR:e};\
         resample=kaiser8.6x64"
    );
    let digest = Sha256::digest(desc.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

fn encode(spec: &LogMelSpectrogram) -> Result<Vec<u8>> {
    let frames = u32::try_from(spec.frames).map_err(|_| Error::format("frames", "exceeds u32"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + spec.values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(&(N_MELS as u32).to_le_bytes());
    out.extend_from_slice(&spec.frame_rate.to_le_bytes());
    out.extend_from_slice(&spec.config_hash.to_le_bytes());
    for v in &spec.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode(buf: &[u8]) -> Result<LogMelSpectrogram> {
    if buf.len() < HEADER_LEN {
        return Err(Error::format("header", format!("{} bytes, need {HEADER_LEN}", buf.len())));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::format("magic", "expected \"LMEL\""));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let frames = u32_at(8) as usize;
    let bins = u32_at(12) as usize;
    if bins != N_MELS {
        return Err(Error::format("bins", format!("expected {N_MELS}, found {bins}")));
    }
    let frame_rate = f32::from_le_bytes(buf[16..20].try_into().unwrap());
    let config_hash = u64::from_le_bytes(buf[20..28].try_into().unwrap());
    let body = &buf[HEADER_LEN..];
    if body.len() != frames * bins * 4 {
        return Err(Error::format(
            "data",
            format!("{} bytes for {frames}×{bins} f32 values", body.len()),
        ));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(LogMelSpectrogram { frames, values, frame_rate, config_hash })
}

pub fn write_features(path: &Path, spec: &LogMelSpectrogram) -> Result<()> {
    crate::fsutil::atomic_write(path, &encode(spec)?)
}

/// Reads a feature file. Callers compare `config_hash` with
/// [`config_hash()`] to detect stale caches.
pub fn read_features(path: &Path) -> Result<LogMelSpectrogram> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|e| match e {
        Error::Format { field, detail } => Error::Format { field, detail: format!("{}: {detail}", path.display()) },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let spec = LogMelSpectrogram::new(1, vec![-100.0; N_MELS]).unwrap();
        let bytes = encode(&spec).unwrap();
        assert_eq!(&bytes[..4], b"LMEL");
        assert_eq!(bytes.len(), HEADER_LEN + 64 * 4);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 64);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 100.0);
        assert_eq!(decode(&bytes).unwrap(), spec);
        assert!(matches!(decode(&bytes[..bytes.len() - 2]), Err(Error::Format { .. })));
    }
}
