use prefnet::augment::{sample_rng, sample_stripes, spec_augment, AugmentConfig, Axis, Stripe};
use prefnet::dsp::{LogMelSpectrogram, N_MELS};
use proptest::prelude::*;

fn fixture(frames: usize) -> LogMelSpectrogram {
    LogMelSpectrogram::new(frames, (0..frames * N_MELS).map(|i| (i % 997) as f32 * 0.1 - 40.0).collect()).unwrap()
}

fn in_stripes(t: usize, m: usize, stripes: &[Stripe]) -> bool {
    stripes.iter().any(|s| match s.axis {
        Axis::Time => (s.start..s.start + s.width).contains(&t),
        Axis::Freq => (s.start..s.start + s.width).contains(&m),
    })
}

#[test]
fn zero_stripes_is_identity() {
    let spec = fixture(200);
    let cfg = AugmentConfig { stripes_per_axis: 0, ..AugmentConfig::default() };
    assert_eq!(spec_augment(&spec, &cfg, &mut sample_rng(1, 0)), spec);
    assert_eq!(spec_augment(&spec, &AugmentConfig::disabled(), &mut sample_rng(1, 0)), spec);
}

#[test]
fn filled_rows_and_columns_respect_width_bounds() {
    let spec = fixture(300);
    let cfg = AugmentConfig::default();
    for i in 0..200 {
        let out = spec_augment(&spec, &cfg, &mut sample_rng(9, i));
        let full_cols = (0..out.frames).filter(|&t| out.frame(t).iter().all(|&v| v == -100.0)).count();
        let full_rows = (0..N_MELS).filter(|&m| (0..out.frames).all(|t| out.get(t, m) == -100.0)).count();
        assert!(full_cols <= 128, "{full_cols}");
        assert!(full_rows <= 8, "{full_rows}");
    }
}

#[test]
fn fixed_seed_is_deterministic() {
    let spec = fixture(150);
    let cfg = AugmentConfig::default();
    let a = spec_augment(&spec, &cfg, &mut sample_rng(42, 7));
    let b = spec_augment(&spec, &cfg, &mut sample_rng(42, 7));
    assert_eq!(a, b);
    assert_eq!(sample_stripes(150, &cfg, &mut sample_rng(42, 7)), sample_stripes(150, &cfg, &mut sample_rng(42, 7)));
    let streams: std::collections::HashSet<_> =
        (0..20).map(|i| format!("{:?}", sample_stripes(150, &cfg, &mut sample_rng(42, i)))).collect();
    assert!(streams.len() > 15);
}

#[test]
fn short_spectrogram_clamps_time_width() {
    let cfg = AugmentConfig::default();
    for i in 0..100 {
        for s in sample_stripes(3, &cfg, &mut sample_rng(0, i)) {
            if s.axis == Axis::Time {
                assert!(s.width <= 3 && s.start + s.width <= 3);
            }
        }
    }
}

#[test]
fn config_validation() {
    assert!(AugmentConfig::default().validate().is_ok());
    assert!(AugmentConfig { max_freq_width: 65, ..Default::default() }.validate().is_err());
    assert!(AugmentConfig { max_time_width: 0, ..Default::default() }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn only_stripe_entries_change(frames in 1usize..200, seed in any::<u64>(), idx in any::<u64>()) {
        let spec = fixture(frames);
        let before = spec.clone();
        let cfg = AugmentConfig::default();
        let stripes = sample_stripes(frames, &cfg, &mut sample_rng(seed, idx));
        let out = spec_augment(&spec, &cfg, &mut sample_rng(seed, idx));
        prop_assert_eq!(&spec, &before);
        prop_assert_eq!(stripes.len(), 4);
        for s in &stripes {
            let (max, extent) = match s.axis { Axis::Time => (64, frames), Axis::Freq => (4, N_MELS) };
            prop_assert!(s.width <= max && s.start + s.width <= extent);
        }
        for t in 0..frames {
            for m in 0..N_MELS {
                if in_stripes(t, m, &stripes) {
                    prop_assert_eq!(out.get(t, m), -100.0);
                } else {
                    prop_assert_eq!(out.get(t, m).to_bits(), spec.get(t, m).to_bits());
                }
            }
        }
    }
}
