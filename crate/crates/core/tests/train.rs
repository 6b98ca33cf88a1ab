use prefnet::augment::AugmentConfig;
use prefnet::dataset::{make_folds, synth_generate, LabelMode, SynthConfig, TrainingExample};
use prefnet::dsp::{LogMelSpectrogram, LOG_FLOOR_DB, N_MELS};
use prefnet::models::{EncoderConfig, Model, ModelConfig, Variant};
use prefnet::tensor::{ParamStore, Tensor};
use prefnet::train::{
    accuracy_from_probs, analyze_last_mlp, clip_key, evaluate_accuracy, fit_loop, last_mlp_product, run_cv,
    train_model, weighted_overall, window, CvOptions, FeatureStore, FoldResult, TrainConfig, WeightAnalysis,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TINY: EncoderConfig = EncoderConfig { channels: [4, 4, 4, 8] };

#[test]
fn learning_rate_decays_per_epoch() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr(0), 5e-4);
    let oracle = 5e-4 * 0.95 * 0.95 * 0.95;
    assert!((cfg.lr(3) - oracle).abs() < 1e-15);
    assert!((cfg.lr(3) - 4.287e-4).abs() < 5e-8);
}

fn scripted(losses: &[f64], cfg: &TrainConfig) -> (Vec<prefnet::train::EpochRecord>, Vec<usize>) {
    let mut snapshots = Vec::new();
    let (history, _) = fit_loop(cfg, &mut snapshots, |_, e, _| Ok((0.0, losses[e.min(losses.len() - 1)])), |s, e| s.push(e))
        .unwrap();
    (history, snapshots)
}

#[test]
fn improving_loss_runs_every_epoch() {
    let losses: Vec<f64> = (0..50).map(|e| 1.0 / (e + 1) as f64).collect();
    let (history, snaps) = scripted(&losses, &TrainConfig::default());
    assert_eq!(history.len(), 50);
    assert_eq!(snaps.last(), Some(&50));
}

#[test]
fn flat_loss_stops_after_patience() {
    let (history, snaps) = scripted(&[0.5; 50], &TrainConfig::default());
    assert_eq!(history.len(), 11);
    assert_eq!(snaps, vec![1]);
    assert_eq!(history[2].lr, 5e-4 * 0.95 * 0.95);
}

proptest! {
    #[test]
    fn best_checkpoint_is_never_worse_than_an_earlier_epoch(losses in prop::collection::vec(0.0f64..1.0, 1..60)) {
        let cfg = TrainConfig::default();
        let (history, snaps) = scripted(&losses, &cfg);
        // oracle: walk the sequence with an explicit stale counter
        let (mut best, mut best_epoch, mut stale, mut ran) = (f64::INFINITY, 0, 0, 0);
        for e in 0..50 {
            let l = losses[e.min(losses.len() - 1)];
            ran += 1;
            if l < best { best = l; best_epoch = e + 1; stale = 0 } else { stale += 1 }
            if stale == 10 { break }
        }
        prop_assert_eq!(history.len(), ran);
        prop_assert_eq!(*snaps.last().unwrap(), best_epoch);
        for h in &history[..best_epoch] {
            prop_assert!(h.val_loss >= best);
        }
    }
}

#[test]
fn ties_count_as_incorrect() {
    assert_eq!(accuracy_from_probs(&[[0.9, 0.1], [0.2, 0.8]], &[0, 1]), 1.0);
    assert_eq!(accuracy_from_probs(&[[0.5, 0.5]], &[0]), 0.0);
    assert_eq!(accuracy_from_probs(&[[0.5, 0.5]], &[1]), 0.0);
    let probs = [[0.7, 0.3], [0.4, 0.6], [0.1, 0.9], [0.6, 0.4]];
    assert_eq!(accuracy_from_probs(&probs, &[0, 1, 1, 1]), 0.75);
}

/// Per-fold question counts and mean accuracies of the published results.
const QUESTIONS: [usize; 7] = [403, 269, 318, 215, 289, 305, 201];
const AO: [f64; 7] = [0.8029, 0.7836, 0.7843, 0.6742, 0.7569, 0.7761, 0.8316];
const ASL: [f64; 7] = [0.8056, 0.7946, 0.7808, 0.6670, 0.7670, 0.7864, 0.8420];
const ASE: [f64; 7] = [0.5757, 0.6887, 0.6499, 0.5826, 0.6753, 0.5633, 0.5714];
const ASP: [f64; 7] = [0.8098, 0.7874, 0.7719, 0.6684, 0.7161, 0.7775, 0.8380];

fn overall(means: &[f64; 7]) -> f64 {
    let folds: Vec<FoldResult> = (0..7).map(|k| FoldResult::from_runs(k, QUESTIONS[k], vec![means[k]])).collect();
    weighted_overall(&folds)
}

#[test]
fn weighted_overall_reproduces_published_overall_accuracies() {
    assert_eq!(QUESTIONS.iter().sum::<usize>(), 2000);
    assert!((overall(&AO) - 0.7756).abs() < 5e-4, "{}", overall(&AO));
    assert!((overall(&ASL) - 0.7804).abs() < 5e-4, "{}", overall(&ASL));
    assert!((overall(&ASE) - 0.6155).abs() < 5e-4, "{}", overall(&ASE));
    assert!((overall(&ASP) - 0.7699).abs() < 5e-4, "{}", overall(&ASP));
}

#[test]
fn fold_statistics_use_population_std() {
    let one = FoldResult::from_runs(0, 10, vec![0.8]);
    assert_eq!((one.mean, one.std), (0.8, 0.0));
    let f = FoldResult::from_runs(1, 10, vec![0.6, 0.7, 0.8, 0.9]);
    assert!((f.mean - 0.75).abs() < 1e-15);
    assert!((f.std - 0.0125f64.sqrt()).abs() < 1e-15);
}

fn head_store(w1: Vec<f64>, hidden: usize, d: usize, w2: Vec<f64>) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.insert("head.fc1.weight", Tensor::new(vec![hidden, d], w1).unwrap(), true);
    p.insert("head.fc2.weight", Tensor::new(vec![1, hidden], w2).unwrap(), true);
    p.insert("head.bn.gamma", Tensor::full(&[hidden], 2.0), true);
    p.insert("head.bn.running_var", Tensor::full(&[hidden], 3.0), false);
    p
}

#[test]
fn weight_product_examples_and_oracle() {
    let n = 5;
    let eye: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
    assert_eq!(last_mlp_product(&head_store(eye, n, n, vec![1.0; n]), false, 1e-5).unwrap(), vec![1.0; n]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, d) = (7, 11);
    let w1: Vec<f64> = (0..h * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w2: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let store = head_store(w1.clone(), h, d, w2.clone());
    let got = last_mlp_product(&store, false, 1e-5).unwrap();
    let folded = last_mlp_product(&store, true, 1e-5).unwrap();
    let s = 2.0 / (3.0f64 + 1e-5).sqrt();
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..h {
            acc += w2[j] * w1[j * d + i];
        }
        assert!((got[i] - acc.abs()).abs() <= 1e-12);
        assert!((folded[i] - (acc * s).abs()).abs() <= 1e-12);
    }
}

#[test]
fn analysis_splits_audio_and_subject_blocks() {
    let m = Model::<f32>::init(ModelConfig::new(Variant::Asl, EncoderConfig::FULL), 0).unwrap();
    let a = analyze_last_mlp(&m, false).unwrap();
    assert_eq!((a.values.len(), a.audio().len(), a.subject().len()), (518, 512, 6));
    let csv = a.to_csv();
    assert_eq!(csv.lines().next(), Some("index,mean_abs_weight"));
    assert_eq!(csv.lines().count(), 519);
    let asp = Model::<f32>::init(ModelConfig::new(Variant::Asp, TINY), 0).unwrap();
    assert_eq!(analyze_last_mlp(&asp, false).unwrap().subject().len(), 8);

    let avg = WeightAnalysis::average(&[
        WeightAnalysis { values: vec![1.0, 3.0], audio_dim: 1, bn_folded: false },
        WeightAnalysis { values: vec![3.0, 5.0], audio_dim: 1, bn_folded: false },
    ])
    .unwrap();
    assert_eq!(avg.values, vec![2.0, 4.0]);
    assert!(WeightAnalysis::average(&[]).is_err());
    let mut broken = Model::<f32>::init(ModelConfig::new(Variant::Ao, TINY), 0).unwrap();
    broken.params = ParamStore::new();
    assert!(analyze_last_mlp(&broken, false).is_err());
}

#[test]
fn windows_pad_with_the_log_floor() {
    let spec = LogMelSpectrogram::new(3, (0..3 * N_MELS).map(|v| v as f32).collect()).unwrap();
    let w = window(&spec, 1, 4);
    assert_eq!(&w[..2 * N_MELS], &spec.values[N_MELS..]);
    assert!(w[2 * N_MELS..].iter().all(|&v| v == LOG_FLOOR_DB));
    assert_eq!(clip_key("dir/s00__d1__max.wav"), "s00__d1__max");
    assert_eq!(clip_key("s00__d1__max"), "s00__d1__max");
}

fn small_synth(mode: LabelMode, n_subjects: usize, n_songs: usize, seed: u64) -> (prefnet::dataset::SynthCorpus, FeatureStore) {
    let synth = synth_generate(&SynthConfig { n_subjects, n_songs, mode, seed, ..Default::default() }).unwrap();
    let store = FeatureStore::from_clips(&synth.clips).unwrap();
    (synth, store)
}

fn examples(synth: &prefnet::dataset::SynthCorpus) -> Vec<TrainingExample> {
    prefnet::dataset::training_examples(&synth.corpus, None, Default::default()).unwrap()
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        batch_size: 16,
        crop_frames: Some(16),
        seed,
        augment: AugmentConfig { max_time_width: 4, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn empty_sets_are_rejected() {
    let (synth, store) = small_synth(LabelMode::Agnostic, 2, 1, 0);
    let ex = examples(&synth);
    let mc = ModelConfig::new(Variant::Ao, TINY);
    assert!(train_model(&quick_cfg(0), &mc, &store, &[], &ex).is_err());
    assert!(train_model(&quick_cfg(0), &mc, &store, &ex, &[]).is_err());
    let out = train_model(&quick_cfg(0), &mc, &store, &ex, &ex).unwrap();
    assert!(evaluate_accuracy(&out.model, &store, &[], 16).is_err());
}

#[test]
fn training_is_bit_reproducible() {
    let (synth, store) = small_synth(LabelMode::Personal, 2, 2, 1);
    let ex = examples(&synth);
    let mc = ModelConfig::new(Variant::Asp, TINY);
    let a = train_model(&quick_cfg(7), &mc, &store, &ex, &ex).unwrap();
    let b = train_model(&quick_cfg(7), &mc, &store, &ex, &ex).unwrap();
    let c = train_model(&quick_cfg(8), &mc, &store, &ex, &ex).unwrap();
    let bits = |m: &Model<f32>| m.params.iter().flat_map(|(_, p)| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_ne!(bits(&a.model), bits(&c.model));
    assert_eq!(a.history, b.history);
    // the returned checkpoint is the best validation epoch
    let best = a.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_val_loss, best);
}

#[test]
fn cross_validation_is_leak_free_and_independent_of_jobs() {
    let (synth, store) = small_synth(LabelMode::Personal, 8, 2, 2);
    let plan = make_folds(&synth.corpus.subjects).unwrap();
    for k in 0..7 {
        let r = plan.rotation(k).unwrap();
        for s in &r.test {
            assert!(!r.val.contains(s) && !r.train.contains(s));
        }
        for s in &r.val {
            assert!(!r.train.contains(s));
        }
    }
    let mc = ModelConfig { mlp_hidden: 8, ..ModelConfig::new(Variant::Asl, TINY) };
    let tc = TrainConfig { max_epochs: 1, ..quick_cfg(0) };
    let opts = CvOptions { runs: 2, base_seed: 5, jobs: 1, folds: Some(vec![0, 3]) };
    let serial = run_cv(&synth.corpus, &store, &mc, &tc, &opts).unwrap();
    let parallel = run_cv(&synth.corpus, &store, &mc, &tc, &CvOptions { jobs: 3, ..opts.clone() }).unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial.folds.len(), 2);
    assert_eq!(serial.cells.len(), 4);
    assert_eq!(serial.cells[1].seed, 5001);
    for f in &serial.folds {
        assert_eq!(f.accuracies.len(), 2);
        assert_eq!(f.n_questions, plan.rotation(f.fold_index).unwrap().test.len() * 20);
    }
    assert!(serial.table().contains("Overall"));
}
