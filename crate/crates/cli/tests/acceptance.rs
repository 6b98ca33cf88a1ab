//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL
//! line; the process exits non-zero if any fails. Pass substrings as
//! arguments to run a subset.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use prefnet::augment::{sample_rng, spec_augment, AugmentConfig};
use prefnet::dataset::{
    build_pairs, filter_corpus, make_folds, read_corpus, subject_blind_ceiling, synth_generate, training_examples,
    translate_score, Corpus, FeatureMask, LabelMode, PreferenceRecord, SubjectInfo, SynthConfig, Volume,
};
use prefnet::dsp::{
    hz_to_mel, logmel, logmel_f64, read_features, write_features, write_wav, AudioClip, LogMelSpectrogram, FMAX,
    FMIN, N_MELS,
};
use prefnet::models::{batch_specs, EncoderConfig, Model, ModelConfig, Variant};
use prefnet::tensor::{
    grad_check, BatchNormArgs, Conv2dSpec, GradCheckOptions, GradCheckReport, Graph, Mode, ParamStore, Scalar,
    Tensor, Var,
};
use prefnet::train::{
    analyze_last_mlp, evaluate_accuracy, fit_loop, run_cv, train_model, weighted_overall, CvOptions, FeatureStore,
    FoldResult, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient suite", gradient_suite),
        ("siamese symmetry", siamese_symmetry),
        ("aggregation arithmetic", aggregation),
        ("dsp", dsp),
        ("specaugment bounds", specaugment),
        ("dataset protocol", dataset_protocol),
        ("overfit", overfit),
        ("personalization", personalization),
        ("schedule and early stop", schedule),
        ("weight analysis", weight_analysis),
        ("round trips and determinism", round_trips),
        ("service", service),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_spec(rng: &mut ChaCha8Rng, frames: usize) -> Vec<f32> {
    (0..frames * N_MELS).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn specs<T: Scalar>(items: &[Vec<f32>], frames: usize) -> Tensor<T> {
    let refs: Vec<&[f32]> = items.iter().map(Vec::as_slice).collect();
    batch_specs(&refs, frames).unwrap()
}

// --- gradient suite ----------------------------------------------------------

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, v) in entries {
        s.insert(n, v, true);
    }
    s
}

/// `Σ y ⊙ r` for a fixed random `r`.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> prefnet::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let r = g.input(Tensor::new(shape.clone(), rand_vec(&mut rng, shape.iter().product()))?);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn layer_opts(samples: usize) -> GradCheckOptions {
    GradCheckOptions { h: 1e-5, samples_per_param: samples, seed: 21, kink_retries: 2, ..Default::default() }
}

fn layer_checks() -> Result<Vec<(&'static str, GradCheckReport)>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut out = Vec::new();

    let mut s = store(vec![
        ("x", tensor(&[5, 12], rand_vec(&mut rng, 60))),
        ("w", tensor(&[9, 12], rand_vec(&mut rng, 108))),
        ("b", tensor(&[9], rand_vec(&mut rng, 9))),
    ]);
    let rep = grad_check(
        &mut s,
        |g, p| {
            let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
            let y = g.linear(x, w, b)?;
            project(g, y, 1)
        },
        layer_opts(60),
    );
    out.push(("linear", ok(rep)?));

    let mut s = store(vec![
        ("x", tensor(&[2, 2, 8, 6], rand_vec(&mut rng, 192))),
        ("w", tensor(&[3, 2, 5, 5], rand_vec(&mut rng, 150))),
    ]);
    let rep = grad_check(
        &mut s,
        |g, p| {
            let (x, w) = (g.param(p, "x")?, g.param(p, "w")?);
            let y = g.conv2d(x, w, Conv2dSpec::new(1, 2))?;
            let y = g.relu(y);
            let y = g.avg_pool2(y)?;
            project(g, y, 2)
        },
        layer_opts(80),
    );
    out.push(("conv2d+relu+avgpool", ok(rep)?));

    let mut s = store(vec![
        ("x", tensor(&[2, 1, 6, 7], rand_vec(&mut rng, 84))),
        ("k", tensor(&[2, 3, 1, 5, 5], rand_vec(&mut rng, 150))),
    ]);
    let rep = grad_check(
        &mut s,
        |g, p| {
            let (x, k) = (g.param(p, "x")?, g.param(p, "k")?);
            let y = g.conv2d_per_sample(x, k, Conv2dSpec::new(1, 2))?;
            project(g, y, 3)
        },
        layer_opts(60),
    );
    out.push(("per-sample conv", ok(rep)?));

    for (mode, label) in [(Mode::Train, "batchnorm train"), (Mode::Eval, "batchnorm eval")] {
        let mut s = store(vec![
            ("x", tensor(&[3, 4, 2, 3], rand_vec(&mut rng, 72))),
            ("g", tensor(&[4], vec![0.7, -1.2, 1.5, 0.4])),
            ("b", tensor(&[4], rand_vec(&mut rng, 4))),
        ]);
        s.insert("rm", tensor(&[4], rand_vec(&mut rng, 4)), false);
        s.insert("rv", tensor(&[4], vec![0.5, 1.0, 2.0, 0.8]), false);
        let rep = grad_check(
            &mut s,
            |g, p| {
                let (x, gamma, beta) = (g.param(p, "x")?, g.param(p, "g")?, g.param(p, "b")?);
                let args = BatchNormArgs {
                    running_mean: p.tensor("rm")?.data(),
                    running_var: p.tensor("rv")?.data(),
                    mean_key: "rm",
                    var_key: "rv",
                    momentum: 0.1,
                    eps: 1e-5,
                };
                let y = g.batch_norm(x, gamma, beta, args, mode)?;
                project(g, y, 4)
            },
            layer_opts(72),
        );
        out.push((label, ok(rep)?));
    }

    let mut s = store(vec![
        ("x", tensor(&[2, 3, 4, 5], rand_vec(&mut rng, 120))),
        ("y", tensor(&[2, 4], rand_vec(&mut rng, 8))),
        ("gate", tensor(&[2, 5], rand_vec(&mut rng, 10))),
    ]);
    let rep = grad_check(
        &mut s,
        |g, p| {
            let x = g.param(p, "x")?;
            let gate = g.param(p, "gate")?;
            let x = g.scale_last_axis(x, gate)?;
            let m = g.mean_axis(x, 3)?;
            let a = g.mean_axis(m, 2)?;
            let b = g.max_axis(m, 2)?;
            let pooled = g.add(a, b)?;
            let y = g.param(p, "y")?;
            let sy = g.sigmoid(y);
            let cat = g.concat(&[pooled, sy], 1)?;
            let top = g.slice_rows(cat, 0, 1)?;
            let bottom = g.slice_rows(cat, 1, 2)?;
            let both = g.concat(&[bottom, top], 1)?;
            let flat = g.reshape(both, &[2, 7])?;
            project(g, flat, 5)
        },
        layer_opts(120),
    );
    out.push(("pooling, gating and shape ops", ok(rep)?));

    let mut s = store(vec![("logits", tensor(&[6, 2], rand_vec(&mut rng, 12)))]);
    let rep = grad_check(
        &mut s,
        |g, p| {
            let x = g.param(p, "logits")?;
            let pr = g.softmax(x)?;
            g.nll_loss(pr, &[0, 1, 1, 0, 1, 0])
        },
        layer_opts(12),
    );
    out.push(("softmax+nll", ok(rep)?));
    Ok(out)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (name, rep) in layer_checks()? {
        ensure!(rep.max_rel_error < 1e-5, "{name}: {rep:?}");
        worst = worst.max(rep.max_rel_error);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let frames = 32;
    for v in Variant::ALL {
        let m = ok(Model::<f64>::init(ModelConfig::new(v, EncoderConfig::DESK), 70))?;
        let n = 3;
        let a: Vec<_> = (0..n).map(|_| rand_spec(&mut rng, frames)).collect();
        let b: Vec<_> = (0..n).map(|_| rand_spec(&mut rng, frames)).collect();
        let (a, b) = (specs::<f64>(&a, frames), specs::<f64>(&b, frames));
        let s = tensor(&[n, 6], rand_vec(&mut rng, n * 6));
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut params = m.params.clone();
        let rep = ok(grad_check(
            &mut params,
            |g, p| {
                let model = Model { config: m.config.clone(), params: p.clone() };
                let (av, bv, sv) = (g.input(a.clone()), g.input(b.clone()), g.input(s.clone()));
                let probs = model.siamese(g, av, bv, sv, Mode::Train)?;
                g.nll_loss(probs, &labels)
            },
            GradCheckOptions { samples_per_param: 8, seed: 2, zero_tol: 1e-8, kink_retries: 2, ..Default::default() },
        ))?;
        ensure!(rep.max_rel_error < 1e-5, "{v}: {rep:?}");
        worst = worst.max(rep.max_rel_error);
        lines.push(format!("{v} {:.1e}/{}", rep.max_rel_error, rep.coordinates_checked));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "suite took {secs:.0} s (limit 120 s)");
    Ok(format!("7 layer checks and 4 variants at 16/32/64/128, max rel error {worst:.2e} ({})", lines.join(", ")))
}

// --- siamese symmetry --------------------------------------------------------

fn siamese_probs<T: Scalar>(m: &Model<T>, a: &Tensor<T>, b: &Tensor<T>, s: &Tensor<T>) -> Vec<T> {
    let mut g = Graph::new();
    let (av, bv, sv) = (g.input(a.clone()), g.input(b.clone()), g.input(s.clone()));
    let p = m.siamese(&mut g, av, bv, sv, Mode::Eval).unwrap();
    g.data(p).to_vec()
}

fn raw_subjects(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .flat_map(|_| {
            [
                rng.gen_range(18.0..60.0),
                rng.gen_range(0..2) as f64,
                rng.gen_range(16.0..300.0),
                rng.gen_range(5.0..20.0),
                rng.gen_range(20_000.0..40_000.0),
                rng.gen_range(95.0..115.0),
            ]
        })
        .collect()
}

fn symmetric_case<T: Scalar>(rng: &mut ChaCha8Rng, case: u64) -> Result<(), String> {
    let v = Variant::ALL[(case % 4) as usize];
    let cfg = ModelConfig {
        mlp_hidden: 16,
        subject_hidden: 8,
        parallel_dim: 4,
        ..ModelConfig::new(v, EncoderConfig { channels: [4, 4, 6, 8] })
    };
    let m = ok(Model::<T>::init(cfg, 1000 + case))?;
    let n = rng.gen_range(1..4);
    let frames = [16, 24, 32][rng.gen_range(0..3)];
    let a: Vec<_> = (0..n).map(|_| rand_spec(rng, frames)).collect();
    let b: Vec<_> = (0..n).map(|_| rand_spec(rng, frames)).collect();
    let (a, b) = (specs::<T>(&a, frames), specs::<T>(&b, frames));
    let s = ok(Tensor::<T>::from_f64(vec![n, 6], &raw_subjects(rng, n)))?;
    let p = siamese_probs(&m, &a, &b, &s);
    let q = siamese_probs(&m, &b, &a, &s);
    for i in 0..n {
        ensure!(
            p[2 * i].to_f64_lossy().to_bits() == q[2 * i + 1].to_f64_lossy().to_bits()
                && p[2 * i + 1].to_f64_lossy().to_bits() == q[2 * i].to_f64_lossy().to_bits(),
            "case {case} ({v}): {:?} vs {:?}",
            (p[2 * i].to_f64_lossy(), p[2 * i + 1].to_f64_lossy()),
            (q[2 * i].to_f64_lossy(), q[2 * i + 1].to_f64_lossy())
        );
    }
    let same = siamese_probs(&m, &a, &a, &s);
    ensure!(same.iter().all(|x| x.to_f64_lossy() == 0.5), "case {case} ({v}): identical inputs gave {:?}",
        same.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>());
    Ok(())
}

fn siamese_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000u64 {
        if case % 2 == 0 {
            symmetric_case::<f64>(&mut rng, case)?;
        } else {
            symmetric_case::<f32>(&mut rng, case)?;
        }
    }
    Ok("1000 cases over 4 variants in f32 and f64: swaps bit-exact, identical inputs exactly 0.5".into())
}

// --- aggregation -------------------------------------------------------------

fn aggregation() -> Outcome {
    const Q: [usize; 7] = [403, 269, 318, 215, 289, 305, 201];
    const AO: [f64; 7] = [0.8029, 0.7836, 0.7843, 0.6742, 0.7569, 0.7761, 0.8316];
    const ASL: [f64; 7] = [0.8056, 0.7946, 0.7808, 0.6670, 0.7670, 0.7864, 0.8420];
    let overall = |means: &[f64; 7]| {
        let folds: Vec<FoldResult> = (0..7).map(|k| FoldResult::from_runs(k, Q[k], vec![means[k]])).collect();
        weighted_overall(&folds)
    };
    let (ao, asl) = (overall(&AO), overall(&ASL));
    ensure!((ao - 0.7756).abs() < 5e-4, "AO overall {ao}");
    ensure!((asl - 0.7804).abs() < 5e-4, "A+S-L overall {asl}");
    Ok(format!("AO {ao:.4} (0.7756), A+S-L {asl:.4} (0.7804)"))
}

// --- dsp -------------------------------------------------------------------

fn sine(freq: f64, amp: f64, n: usize) -> Vec<f32> {
    (0..n).map(|i| (amp * (2.0 * PI * freq * i as f64 / 32_000.0).sin()) as f32).collect()
}

fn dsp() -> Outcome {
    let clip = |s: Vec<f32>| AudioClip::new(s, 32_000, "t").unwrap();
    let ten = ok(logmel(&clip(sine(440.0, 0.1, 320_000))))?;
    ensure!(ten.frames == 1001 && ten.values.len() == 1001 * 64, "10 s gave {} frames", ten.frames);

    let silence = ok(logmel(&clip(vec![0.0; 320_000])))?;
    ensure!(silence.values.iter().all(|&v| v == -100.0), "silence is not all -100");

    // the mel band whose centre is nearest 1 kHz on the mel scale
    let (lo, hi) = (hz_to_mel(FMIN), hz_to_mel(FMAX));
    let target = 2595.0 * (1.0f64 + 1000.0 / 700.0).log10();
    let expected = (0..N_MELS)
        .min_by(|&a, &b| {
            let c = |m: usize| (lo + (m + 1) as f64 * (hi - lo) / (N_MELS + 1) as f64 - target).abs();
            c(a).total_cmp(&c(b))
        })
        .unwrap();
    let tone = ok(logmel(&clip(sine(1000.0, 0.5, 32_000))))?;
    let mut mean = vec![0.0f64; N_MELS];
    for t in 10..tone.frames - 10 {
        for (m, v) in tone.frame(t).iter().enumerate() {
            mean[m] += *v as f64;
        }
    }
    let peak = (0..N_MELS).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
    ensure!(peak == expected, "1 kHz peak at mel band {peak}, expected {expected}");

    let base: Vec<f32> =
        sine(700.0, 0.2, 32_000).iter().enumerate().map(|(i, s)| s + 0.01 * ((i * 31 % 17) as f32 / 17.0 - 0.5)).collect();
    let doubled: Vec<f32> = base.iter().map(|s| 2.0 * s).collect();
    let (_, a) = ok(logmel_f64(&clip(base)))?;
    let (_, b) = ok(logmel_f64(&clip(doubled)))?;
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        if *x > -90.0 {
            worst = worst.max((y - x - 6.02).abs());
        }
    }
    ensure!(worst <= 0.01, "doubling shift off 6.02 dB by {worst}");
    Ok(format!("1001x64 for 10 s, silence -100, 1 kHz in band {peak}, doubling 6.02 dB ±{worst:.4}"))
}

// --- specaugment -------------------------------------------------------------

fn specaugment() -> Outcome {
    let frames = 1001;
    let values: Vec<f32> = (0..frames * N_MELS).map(|i| (i % 997) as f32 * 0.1 - 40.0).collect();
    let spec = LogMelSpectrogram::new(frames, values).unwrap();
    let cfg = AugmentConfig::default();
    let (mut max_rows, mut max_cols) = (0, 0);
    for draw in 0..10_000u64 {
        let out = spec_augment(&spec, &cfg, &mut sample_rng(77, draw));
        let col_masked: Vec<bool> = (0..frames).map(|t| out.frame(t).iter().all(|&v| v == -100.0)).collect();
        let row_masked: Vec<bool> = (0..N_MELS).map(|m| (0..frames).all(|t| out.get(t, m) == -100.0)).collect();
        let (rows, cols) = (row_masked.iter().filter(|&&b| b).count(), col_masked.iter().filter(|&&b| b).count());
        ensure!(rows <= 8 && cols <= 128, "draw {draw}: {rows} rows, {cols} columns");
        max_rows = max_rows.max(rows);
        max_cols = max_cols.max(cols);
        for t in 0..frames {
            for m in 0..N_MELS {
                let (o, i) = (out.get(t, m), spec.get(t, m));
                if !(col_masked[t] || row_masked[m]) {
                    ensure!(o.to_bits() == i.to_bits(), "draw {draw}: unmasked ({t},{m}) changed {i} -> {o}");
                }
            }
        }
    }
    Ok(format!("10000 draws, at most {max_rows} rows and {max_cols} columns masked, all other entries bit-identical"))
}

// --- dataset protocol --------------------------------------------------------

fn record(id: usize, subject: &str, raw: i32) -> PreferenceRecord {
    PreferenceRecord {
        record_id: format!("r{id}"),
        subject_id: subject.into(),
        song_id: "song0".into(),
        volume: Volume::Normal,
        clip_a_id: "a.wav".into(),
        clip_b_id: "b.wav".into(),
        raw_score: raw,
        translated_score: raw - 3,
        questionnaire_id: "normal-q0".into(),
        extra: Default::default(),
    }
}

fn dataset_protocol() -> Outcome {
    let groups = |songs: usize| {
        let mut g = IndexMap::new();
        for s in 0..songs {
            g.insert((format!("song{s}"), Volume::Max), (0..5).map(|d| format!("song{s}_d{d}.wav")).collect::<Vec<_>>());
        }
        g
    };
    let one = ok(build_pairs(&groups(1), 5, &mut ChaCha8Rng::seed_from_u64(0)))?;
    ensure!(one.pairs.len() == 10, "5 clips gave {} pairs", one.pairs.len());
    let plan = ok(build_pairs(&groups(7), 5, &mut ChaCha8Rng::seed_from_u64(1)))?;
    ensure!(plan.pairs.len() == 70, "7 songs gave {} pairs", plan.pairs.len());
    let mut covered = HashSet::new();
    for q in &plan.questionnaires {
        ensure!(q.pair_ids.len() == 14, "{} has {} pairs", q.questionnaire_id, q.pair_ids.len());
        let mut per_song: HashMap<&str, usize> = HashMap::new();
        for id in &q.pair_ids {
            *per_song.entry(&plan.pair(id).unwrap().song_id).or_default() += 1;
            covered.insert(id.clone());
        }
        ensure!(per_song.len() == 7 && per_song.values().all(|&c| c == 2), "{}: {per_song:?}", q.questionnaire_id);
    }
    ensure!(covered.len() == 70, "questionnaires cover {} pairs", covered.len());

    let image: Vec<i32> = (1..=5).map(|r| translate_score(r).unwrap()).collect();
    ensure!(image == [-2, -1, 0, 1, 2], "translation {image:?}");
    ensure!((1..=5).all(|r| translate_score(6 - r).unwrap() == -translate_score(r).unwrap()), "not antisymmetric");
    ensure!(translate_score(0).is_err() && translate_score(6).is_err(), "out-of-range scores accepted");

    let mut c = Corpus::default();
    for i in 0..10 {
        c.subjects.push(SubjectInfo::new(format!("k{i}"), 20.0 + i as f64, 0).with_specs(32.0, 20.0, -1.0, -1.0));
    }
    c.subjects.push(SubjectInfo::new("x3", 30.0, 1).with_specs(-1.0, -1.0, -1.0, 100.0));
    c.subjects.push(SubjectInfo::new("x4", 31.0, 0));
    let mut n = 0;
    for k in 0..100 {
        c.records.push(record(n, &format!("k{}", k % 10), [1, 2, 4, 5][k % 4]));
        n += 1;
    }
    for k in 0..30 {
        c.records.push(record(n, &format!("k{}", k % 10), 3));
        n += 1;
    }
    for k in 0..20 {
        c.records.push(record(n, ["x3", "x4"][k % 2], 5));
        n += 1;
    }
    let (kept, report) = filter_corpus(&c);
    ensure!(report.excluded_subjects == ["x3", "x4"], "excluded {:?}", report.excluded_subjects);
    ensure!(
        (report.records_kept, report.dropped_no_preference, report.dropped_excluded_subject) == (100, 30, 20),
        "{report:?}"
    );
    ensure!(ok(training_examples(&kept, None, FeatureMask::All))?.len() == 100, "training examples miscounted");

    let subjects: Vec<SubjectInfo> =
        (0..23).map(|i| SubjectInfo::new(format!("s{i:02}"), (60 - (i * 7) % 40) as f64, 0)).collect();
    let folds = ok(make_folds(&subjects))?;
    ensure!(folds.sizes() == [4, 4, 3, 3, 3, 3, 3], "fold sizes {:?}", folds.sizes());
    for k in 0..7 {
        let r = ok(folds.rotation(k))?;
        ensure!(r.test_fold == k && r.val_fold == (k + 1) % 7, "rotation {k}: {} {}", r.test_fold, r.val_fold);
        let (te, va, tr): (HashSet<_>, HashSet<_>, HashSet<_>) =
            (r.test.iter().collect(), r.val.iter().collect(), r.train.iter().collect());
        ensure!(te.is_disjoint(&va) && te.is_disjoint(&tr) && va.is_disjoint(&tr), "rotation {k} leaks subjects");
        ensure!(te.len() + va.len() + tr.len() == 23, "rotation {k} loses subjects");
    }
    Ok("10/70 pairs, 5 questionnaires of 14 (2 per song), score translation, exclusion counts, folds [4,4,3,3,3,3,3]".into())
}

// --- overfit ---------------------------------------------------------------

fn overfit() -> Outcome {
    let start = Instant::now();
    let synth = ok(synth_generate(&SynthConfig { n_subjects: 1, n_songs: 4, mode: LabelMode::Agnostic, seed: 3, ..Default::default() }))?;
    let store = ok(FeatureStore::from_clips(&synth.clips))?;
    let ex: Vec<_> = ok(training_examples(&synth.corpus, None, FeatureMask::All))?.into_iter().take(32).collect();
    ensure!(ex.len() == 32, "only {} pairs", ex.len());
    let tc = TrainConfig {
        max_epochs: 200,
        patience: 200,
        batch_size: 32,
        crop_frames: Some(32),
        augment: AugmentConfig::disabled(),
        ..Default::default()
    };
    let out = ok(train_model(&tc, &ModelConfig::new(Variant::Ao, EncoderConfig::DESK), &store, &ex, &ex))?;
    let acc = ok(evaluate_accuracy(&out.model, &store, &ex, out.frames))?;
    ensure!(acc == 1.0, "train accuracy {acc} after {} epochs", out.history.len());
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "took {secs:.0} s (limit 300 s)");
    Ok(format!("AO 100% on 32 pairs, best epoch {} of {}", out.best_epoch, out.history.len()))
}

// --- personalization -----------------------------------------------------------

fn personalization() -> Outcome {
    let start = Instant::now();
    let seeds = 0..5u64;
    let train = TrainConfig {
        lr0: 3e-3,
        batch_size: 16,
        max_epochs: 15,
        patience: 10,
        crop_frames: Some(16),
        augment: AugmentConfig::disabled(),
        ..Default::default()
    };
    let model = |v| ModelConfig { mlp_hidden: 64, ..ModelConfig::new(v, EncoderConfig { channels: [4, 4, 4, 8] }) };
    let (mut ao, mut asl, mut ceiling) = (Vec::new(), Vec::new(), Vec::new());
    for seed in seeds {
        let synth =
            ok(synth_generate(&SynthConfig { n_subjects: 24, mode: LabelMode::Personal, seed, ..Default::default() }))?;
        ensure!(synth.corpus.records.len() >= 600, "{} pairs", synth.corpus.records.len());
        let store = ok(FeatureStore::from_clips(&synth.clips))?;
        let opts = CvOptions { runs: 1, base_seed: seed, jobs: 1, folds: None };
        for (v, acc) in [(Variant::Ao, &mut ao), (Variant::Asl, &mut asl)] {
            let report = ok(run_cv(&synth.corpus, &store, &model(v), &train, &opts))?;
            acc.push(report.overall_accuracy);
        }
        ceiling.push(subject_blind_ceiling(&synth.corpus.records));
        eprintln!("  seed {seed}: AO {:.4}  A+S-L {:.4}  ceiling {:.4}", ao.last().unwrap(), asl.last().unwrap(), ceiling.last().unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ao_m, asl_m, ceil_m) = (mean(&ao), mean(&asl), mean(&ceiling));
    let detail = format!("A+S-L {asl_m:.4}, AO {ao_m:.4}, subject-blind ceiling {ceil_m:.4} over 5 seeds");
    ensure!(asl_m >= ao_m + 0.10, "{detail}: gap {:.4} < 0.10", asl_m - ao_m);
    ensure!(ao_m <= ceil_m + 0.05, "{detail}: AO exceeds ceiling + 0.05");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 1800.0, "{detail}: took {secs:.0} s (limit 1800 s)");
    Ok(detail)
}

// --- schedule --------------------------------------------------------------

fn schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let mut expected = 5e-4f64;
    for e in 0..50 {
        ensure!(cfg.lr(e) == 5e-4 * 0.95f64.powi(e as i32), "lr({e}) = {}", cfg.lr(e));
        ensure!((cfg.lr(e) - expected).abs() <= 1e-12 * expected, "lr({e}) drifts from repeated products");
        expected *= 0.95;
    }
    let run = |losses: Vec<f64>| {
        let mut best = Vec::new();
        let (history, _) = fit_loop(&cfg, &mut best, |_, e, _| Ok((0.0, losses[e])), |b: &mut Vec<usize>, e| b.push(e)).unwrap();
        (history.len(), best)
    };
    let (flat, flat_best) = run(vec![0.7; 50]);
    ensure!(flat == 11 && flat_best == [1], "flat loss ran {flat} epochs, best {flat_best:?}");
    let (improving, _) = run((0..50).map(|e| 1.0 / (1 + e) as f64).collect());
    ensure!(improving == 50, "improving loss ran {improving} epochs");
    Ok("lr matches 5e-4·0.95^e for 50 epochs, flat run stops after 11, improving run completes 50".into())
}

// --- weight analysis ---------------------------------------------------------

fn product_oracle(params: &ParamStore<f32>) -> Vec<f64> {
    let w1 = params.tensor("head.fc1.weight").unwrap();
    let w2 = params.tensor("head.fc2.weight").unwrap();
    let (h, d) = (w1.shape()[0], w1.shape()[1]);
    (0..d)
        .map(|i| (0..h).map(|j| w2.data()[j] as f64 * w1.data()[j * d + i] as f64).sum::<f64>().abs())
        .collect()
}

fn weight_analysis() -> Outcome {
    let mut worst = 0.0f64;
    for (v, len, sub) in [(Variant::Asl, 518, 6), (Variant::Asp, 520, 8)] {
        let m = ok(Model::<f32>::init(ModelConfig::new(v, EncoderConfig::FULL), 5))?;
        let a = ok(analyze_last_mlp(&m, false))?;
        ensure!(a.values.len() == len && a.subject().len() == sub, "{v}: {} values, {} subject", a.values.len(), a.subject().len());
        for (x, y) in a.values.iter().zip(product_oracle(&m.params)) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure!(worst <= 1e-12, "max deviation from the product oracle {worst:e}");
    Ok(format!("A+S-L 518 (6 subject), A+S-P 520 (8 subject), oracle deviation {worst:.1e}"))
}

// --- round trips -------------------------------------------------------------

fn bits(m: &Model<f32>) -> Vec<u32> {
    m.params.iter().flat_map(|(_, p)| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let m = ok(Model::<f32>::init(ModelConfig::new(Variant::Asp, EncoderConfig::DESK), 9))?;
    let path = dir.path().join("m.ckpt");
    ok(m.save(&path))?;
    let back = ok(Model::<f32>::load(&path))?;
    ensure!(back.config == m.config && bits(&back) == bits(&m), "checkpoint round trip changed parameters");
    let names: Vec<_> = m.params.iter().map(|(n, _)| n.clone()).collect();
    ensure!(back.params.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>() == names, "parameter names changed");

    let spec = ok(logmel(&AudioClip::new(sine(523.0, 0.3, 32_000), 32_000, "c").unwrap()))?;
    let fp = dir.path().join("c.lmel");
    ok(write_features(&fp, &spec))?;
    let again = ok(read_features(&fp))?;
    ensure!(
        again.frames == spec.frames
            && again.values.iter().map(|v| v.to_bits()).eq(spec.values.iter().map(|v| v.to_bits())),
        "feature cache round trip changed values"
    );

    let synth = ok(synth_generate(&SynthConfig { n_subjects: 8, n_songs: 2, seed: 4, ..Default::default() }))?;
    let store = ok(FeatureStore::from_clips(&synth.clips))?;
    let ex = ok(training_examples(&synth.corpus, None, FeatureMask::All))?;
    let tc = TrainConfig { max_epochs: 3, batch_size: 16, crop_frames: Some(16), seed: 11, ..Default::default() };
    let mc = ModelConfig { mlp_hidden: 16, ..ModelConfig::new(Variant::Ase, EncoderConfig { channels: [4, 4, 4, 8] }) };
    let a = ok(train_model(&tc, &mc, &store, &ex, &ex))?;
    let b = ok(train_model(&tc, &mc, &store, &ex, &ex))?;
    ensure!(bits(&a.model) == bits(&b.model) && a.history == b.history, "fixed-seed training runs differ");
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ok(a.model.save(&pa))?;
    ok(b.model.save(&pb))?;
    ensure!(std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap(), "checkpoint files differ");
    Ok("checkpoint, feature cache and fixed-seed training are bit-identical".into())
}

// --- service ---------------------------------------------------------------

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(log: &Path, audio: &Path) -> Result<Server, String> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_prefnet"))
            .args(["serve", "--port", "0", "--seed", "5"])
            .arg("--audio-dir")
            .arg(audio)
            .arg("--log")
            .arg(log)
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .ok_or_else(|| format!("unexpected server output `{line}`"))?
            .to_string();
        Ok(Server { child, base })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
    }
}

fn call(client: &reqwest::blocking::Client, method: &str, url: String, body: Option<Value>) -> Result<(u16, String), String> {
    let req = match method {
        "GET" => client.get(url),
        _ => client.post(url),
    };
    let req = match body {
        Some(b) => req.json(&b),
        None => req,
    };
    let resp = req.timeout(Duration::from_secs(30)).send().map_err(|e| e.to_string())?;
    Ok((resp.status().as_u16(), resp.text().map_err(|e| e.to_string())?))
}

fn service() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let audio = dir.path().join("audio");
    std::fs::create_dir(&audio).unwrap();
    for song in 0..7 {
        for d in 0..5 {
            let clip = AudioClip::new(sine(200.0 + 50.0 * d as f64, 0.2, 4_000), 32_000, "c").unwrap();
            ok(write_wav(&audio.join(format!("s{song:02}__d{d}__normal.wav")), &clip))?;
        }
    }
    let log = dir.path().join("answers.log");
    let client = reqwest::blocking::Client::new();
    let json_of = |s: &str| serde_json::from_str::<Value>(s).map_err(|e| format!("{e}: {s}"));

    let server = Server::start(&log, &audio)?;
    let intake = json!({"age": 34, "gender": "female", "impedance": 32, "freq_low": 15, "freq_high": 25000,
                        "sensitivity": "", "equipment_label": "closed-back"});
    let (status, body) = call(&client, "POST", format!("{}/api/sessions", server.base), Some(intake))?;
    ensure!(status == 201, "intake returned {status}: {body}");
    let created = json_of(&body)?;
    let sid = created["session_id"].as_str().unwrap().to_string();
    ensure!(created["total"] == 14, "session has {} pairs", created["total"]);

    let scores = [5, 2, 3, 4, 1, 2, 4, 3, 5, 1, 4, 2, 5, 1];
    let mut answered = Vec::new();
    let mut server = Some(server);
    for (i, &score) in scores.iter().enumerate() {
        if i == 7 {
            server.take().unwrap().kill();
            server = Some(Server::start(&log, &audio)?);
        }
        let base = &server.as_ref().unwrap().base;
        let next = json_of(&call(&client, "GET", format!("{base}/api/sessions/{sid}/next"), None)?.1)?;
        ensure!(next["position"] == i + 1 && next["done"] == false, "before answer {}: {next}", i + 1);
        let pair_id = next["pair"]["pair_id"].as_str().unwrap().to_string();
        let wav = client.get(format!("{base}{}", next["pair"]["clip_a_url"].as_str().unwrap())).send().map_err(|e| e.to_string())?;
        ensure!(wav.status().as_u16() == 200, "audio fetch returned {}", wav.status());
        let (status, body) = call(
            &client,
            "POST",
            format!("{base}/api/sessions/{sid}/answers"),
            Some(json!({"pair_id": pair_id, "raw_score": score})),
        )?;
        ensure!(status == 200, "answer {} returned {status}: {body}", i + 1);
        answered.push(pair_id);
    }
    let base = server.as_ref().unwrap().base.clone();
    let done = json_of(&call(&client, "GET", format!("{base}/api/sessions/{sid}/next"), None)?.1)?;
    ensure!(done["done"] == true, "session not done: {done}");
    let (status, _) = call(&client, "POST", format!("{base}/api/sessions/{sid}/answers"),
        Some(json!({"pair_id": answered[0], "raw_score": 4})))?;
    ensure!(status == 409, "re-answer returned {status}");

    let (status, text) = call(&client, "GET", format!("{base}/api/export"), None)?;
    ensure!(status == 200, "export returned {status}");
    server.take().unwrap().kill();
    let path = dir.path().join("export.jsonl");
    std::fs::write(&path, &text).unwrap();
    let corpus = ok(read_corpus(&path))?;
    ensure!(corpus.subjects.len() == 1 && corpus.records.len() == 14, "{} subjects, {} records", corpus.subjects.len(), corpus.records.len());
    let got: Vec<String> = corpus.records.iter().map(|r| r.record_id.trim_start_matches(&format!("{sid}-")).to_string()).collect();
    ensure!(got == answered, "export order or content differs from the answers given");
    ensure!(corpus.records.iter().zip(scores).all(|(r, s)| r.raw_score == s && r.translated_score == s - 3), "scores altered");
    ensure!(corpus.subjects[0].sensitivity == -1.0, "blank spec stored as {}", corpus.subjects[0].sensitivity);
    let (kept, report) = filter_corpus(&corpus);
    ensure!(kept.records.len() == 12 && report.dropped_no_preference == 2, "{report:?}");
    Ok("intake, 14 answers with a kill and restart after answer 7, export loads and filters (12 of 14 kept)".into())
}
