//! Rational 320/441 polyphase resampler with a Kaiser-windowed sinc
//! prototype.

use std::f64::consts::PI;
use std::sync::OnceLock;

use super::{AudioClip, SOURCE_RATE, TARGET_RATE};
use crate::{Error, Result};

const UP: usize = 320;
const DOWN: usize = 441;
const TAPS: usize = 64;
const HALF: isize = (TAPS / 2) as isize;
const BETA: f64 = 8.6;
/// Cutoff as a fraction of the output Nyquist frequency.
const ROLLOFF: f64 = 0.95;

/// Output length `round(n · 32000 / 44100)`.
pub fn resampled_len(n: usize) -> usize {
    (2 * n * UP + DOWN) / (2 * DOWN)
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// `UP × TAPS` table; phase `p` holds taps for input offsets
/// `-HALF+1 ..= HALF` around `floor(t)` where `frac(t) = p / UP`.
fn phase_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let cutoff = ROLLOFF * UP as f64 / DOWN as f64;
        let i0_beta = bessel_i0(BETA);
        let mut table = vec![0.0; UP * TAPS];
        for p in 0..UP {
            let frac = p as f64 / UP as f64;
            let row = &mut table[p * TAPS..(p + 1) * TAPS];
            for (j, tap) in row.iter_mut().enumerate() {
                let offset = j as isize - HALF + 1;
                let d = frac - offset as f64;
                let x = cutoff * d;
                let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
                let r = d / HALF as f64;
                let win = if r.abs() >= 1.0 { 0.0 } else { bessel_i0(BETA * (1.0 - r * r).sqrt()) / i0_beta };
                *tap = sinc * win;
            }
            let dc: f64 = row.iter().sum();
            row.iter_mut().for_each(|t| *t /= dc);
        }
        table
    })
}

/// 44.1 kHz to 32 kHz; 32 kHz input is returned unchanged. Samples outside
/// the clip are treated as zero.
pub fn resample_to_32k(clip: &AudioClip) -> Result<AudioClip> {
    match clip.sample_rate {
        TARGET_RATE => return Ok(clip.clone()),
        SOURCE_RATE => {}
        rate => return Err(Error::UnsupportedRate { rate }),
    }
    let table = phase_table();
    let x = &clip.samples;
    let n_out = resampled_len(x.len());
    let mut out = Vec::with_capacity(n_out);
    for m in 0..n_out {
        let pos = m * DOWN;
        let base = (pos / UP) as isize;
        let phase = pos % UP;
        let taps = &table[phase * TAPS..(phase + 1) * TAPS];
        let mut acc = 0.0f64;
        for (j, &h) in taps.iter().enumerate() {
            let k = base + j as isize - HALF + 1;
            if k >= 0 && (k as usize) < x.len() {
                acc += h * x[k as usize] as f64;
            }
        }
        out.push((acc as f32).clamp(-1.0, 1.0));
    }
    AudioClip::new(out, TARGET_RATE, clip.source_id.clone())
}
