use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{frame_count, HOP, N_BINS, N_FFT};
use crate::{Error, Result};

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Index into a signal of length `n` after reflect padding, folding
/// repeatedly so clips shorter than the pad still work.
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn plan() -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(N_FFT)
}

/// Squared-magnitude STFT, `frames × 513` row-major with
/// `frames = 1 + floor(n / 320)`.
pub fn stft_power(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("stft of an empty clip".into()));
    }
    let n = samples.len();
    let frames = frame_count(n);
    let window = hann_window(N_FFT);
    let fft = plan();
    let pad = (N_FFT / 2) as isize;
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = vec![0.0; frames * N_BINS];
    for t in 0..frames {
        let start = (t * HOP) as isize - pad;
        for (i, (slot, w)) in buf.iter_mut().zip(&window).enumerate() {
            *slot = Complex::new(samples[reflect(start + i as isize, n)] * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (o, c) in out[t * N_BINS..(t + 1) * N_BINS].iter_mut().zip(&buf) {
            *o = c.norm_sqr();
        }
    }
    Ok(out)
}

/// [`stft_power`] split into per-frame rows.
pub fn stft_power_frames(samples: &[f64]) -> Result<Vec<Vec<f64>>> {
    Ok(stft_power(samples)?.chunks_exact(N_BINS).map(<[f64]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_numpy_convention() {
        // numpy.pad([0,1,2,3], 3, 'reflect') = [3,2,1,0,1,2,3,2,1,0]
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-5, 1), 0);
    }
}
