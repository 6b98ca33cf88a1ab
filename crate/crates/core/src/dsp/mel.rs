use super::{FMAX, FMIN, N_BINS, N_FFT, N_MELS, TARGET_RATE};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `64 × 513` triangular filterbank, row-major, each row scaled so its
/// largest weight is 1.
pub fn mel_filterbank() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(FMIN), hz_to_mel(FMAX));
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = TARGET_RATE as f64 / N_FFT as f64;
    let mut fb = vec![0.0; N_MELS * N_BINS];
    for m in 0..N_MELS {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut fb[m * N_BINS..(m + 1) * N_BINS];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            row.iter_mut().for_each(|w| *w /= peak);
        }
    }
    fb
}
