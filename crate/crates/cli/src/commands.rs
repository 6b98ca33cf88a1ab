use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use prefnet::dataset::{
    filter_corpus, make_folds, read_corpus, subject_blind_ceiling, synth_generate, training_examples, write_corpus,
    write_synth, Corpus, FeatureMask, LabelMode, TrainingExample, Volume,
};
use prefnet::dsp::featurize_dir;
use prefnet::fsutil::atomic_write;
use prefnet::models::{sidecar_path, EncoderConfig, Model, ModelConfig, Variant, MIN_FRAMES};
use prefnet::train::{analyze_last_mlp, evaluate_accuracy, run_cv_with, train_model, FeatureStore, TrainConfig, WeightAnalysis};
use prefnet_service::plan::{load_plan, plan_from_audio_dir};
use prefnet_service::{router, serve, Service};
use serde_json::json;

use crate::config::{fold_index, require, DataConfig, FileConfig, Overrides};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::{
    AnalyzeArgs, Cli, Command, CvArgs, DataArgs, EvaluateArgs, ExportArgs, FeaturizeArgs, ModelArgs, ServeArgs,
    SynthArgs, TrainArgs, TrainingArgs,
};

struct Ctx {
    file: FileConfig,
    overrides: Overrides,
    manifest: RunManifest,
}

impl Ctx {
    fn finish(&mut self, config: serde_json::Value, manifest_path: &Path) -> Result<()> {
        self.manifest.config = config;
        self.manifest.flag_overrides = std::mem::take(&mut self.overrides.keys);
        self.manifest.write(manifest_path, true)
    }
}

pub fn execute(cli: Cli, args: Vec<String>) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let name = match &cli.command {
        Command::Featurize(_) => "featurize",
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Cv(_) => "cv",
        Command::Evaluate(_) => "evaluate",
        Command::AnalyzeWeights(_) => "analyze-weights",
        Command::Serve(_) => "serve",
        Command::Export(_) => "export",
    };
    let mut ctx = Ctx { file, overrides: Overrides::default(), manifest: RunManifest::new(name, args, cli.config) };
    match cli.command {
        Command::Featurize(a) => featurize(&mut ctx, a),
        Command::Synth(a) => synth(&mut ctx, a),
        Command::Train(a) => train(&mut ctx, a),
        Command::Cv(a) => cv(&mut ctx, a),
        Command::Evaluate(a) => evaluate(&mut ctx, a),
        Command::AnalyzeWeights(a) => analyze(&mut ctx, a),
        Command::Serve(a) => serve_cmd(&mut ctx, a),
        Command::Export(a) => export(&mut ctx, a),
    }
}

fn parse_encoder(s: &str) -> Result<EncoderConfig> {
    match s {
        "full" => return Ok(EncoderConfig::FULL),
        "desk" => return Ok(EncoderConfig::DESK),
        _ => {}
    }
    let widths: Vec<usize> = s
        .split(',')
        .map(|w| w.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Validation(format!("encoder `{s}` is not full, desk or four widths")))?;
    let channels: [usize; 4] = widths
        .try_into()
        .map_err(|_| CliError::Validation(format!("encoder `{s}` needs exactly four widths")))?;
    Ok(EncoderConfig { channels })
}

fn parse_list<T>(s: &str, what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    s.split(',')
        .map(|item| parse(item.trim()).ok_or_else(|| CliError::Validation(format!("bad {what} `{item}` in `{s}`"))))
        .collect()
}

fn apply_data(ov: &mut Overrides, cfg: &mut DataConfig, a: DataArgs) {
    ov.set_some(&mut cfg.corpus, a.corpus, "data.corpus");
    ov.set_some(&mut cfg.features, a.features, "data.features");
}

fn apply_model(ov: &mut Overrides, cfg: &mut ModelConfig, a: ModelArgs) -> Result<()> {
    ov.set(&mut cfg.variant, a.model.map(|m| m.parse::<Variant>()).transpose()?, "model.variant");
    ov.set(&mut cfg.encoder, a.encoder.map(|e| parse_encoder(&e)).transpose()?, "model.encoder");
    ov.set(&mut cfg.mlp_hidden, a.mlp_hidden, "model.mlp_hidden");
    ov.set(&mut cfg.feature_mask, a.mask.map(|m| m.parse::<FeatureMask>()).transpose()?, "model.feature_mask");
    Ok(cfg.validate()?)
}

fn apply_training(ov: &mut Overrides, cfg: &mut TrainConfig, a: TrainingArgs) {
    ov.set(&mut cfg.lr0, a.lr0, "train.lr0");
    ov.set(&mut cfg.lr_decay, a.lr_decay, "train.lr_decay");
    ov.set(&mut cfg.batch_size, a.batch_size, "train.batch_size");
    ov.set(&mut cfg.max_epochs, a.max_epochs, "train.max_epochs");
    ov.set(&mut cfg.patience, a.patience, "train.patience");
    ov.set_some(&mut cfg.crop_frames, a.crop_frames, "train.crop_frames");
    ov.set(&mut cfg.augment.enabled, a.no_augment.then_some(false), "train.augment.enabled");
}

fn load_data(cfg: &DataConfig) -> Result<(Corpus, FeatureStore)> {
    let corpus = read_corpus(require(&cfg.corpus, "data.corpus", "--corpus")?)?;
    let dir = require(&cfg.features, "data.features", "--features")?;
    let store = FeatureStore::load_dir(dir)?;
    if store.is_empty() {
        return Err(CliError::Validation(format!("no feature files in {}", dir.display())));
    }
    Ok((corpus, store))
}

fn window_frames(crop: Option<usize>, store: &FeatureStore, examples: &[TrainingExample]) -> Result<usize> {
    let frames = match crop {
        Some(f) => f,
        None => store.min_frames(examples)?,
    };
    if frames < MIN_FRAMES {
        return Err(CliError::Validation(format!("clips have {frames} frames, the encoder needs {MIN_FRAMES}")));
    }
    Ok(frames)
}

fn featurize(ctx: &mut Ctx, a: FeaturizeArgs) -> Result<()> {
    let data = &mut ctx.file.data;
    ctx.overrides.set_some(&mut data.audio, a.input, "data.audio");
    ctx.overrides.set_some(&mut data.features, a.output, "data.features");
    let input = require(&data.audio, "data.audio", "--input")?.clone();
    let output = require(&data.features, "data.features", "--output")?.clone();
    if !input.is_dir() {
        return Err(CliError::Validation(format!("{} is not a directory", input.display())));
    }
    let written = featurize_dir(&input, &output)?;
    println!("featurized {} clips into {}", written.len(), output.display());
    ctx.manifest.summary = json!({ "clips": written.len() });
    ctx.manifest.artifacts = written;
    let config = json!({ "data": ctx.file.data });
    ctx.finish(config, &output.join("manifest.json"))
}

fn synth(ctx: &mut Ctx, a: SynthArgs) -> Result<()> {
    let (ov, cfg) = (&mut ctx.overrides, &mut ctx.file.synth);
    ov.set(&mut cfg.n_subjects, a.subjects, "synth.n_subjects");
    ov.set(&mut cfg.n_songs, a.songs, "synth.n_songs");
    ov.set(&mut cfg.n_devices, a.devices, "synth.n_devices");
    ov.set(&mut cfg.mode, a.mode.map(|m| m.parse::<LabelMode>()).transpose()?, "synth.mode");
    ov.set(&mut cfg.seed, a.seed, "synth.seed");
    let volumes = a.volumes.map(|v| parse_list(&v, "volume", |s| s.parse::<Volume>().ok())).transpose()?;
    ov.set(&mut cfg.volumes, volumes, "synth.volumes");
    ov.set(&mut cfg.flip_prob, a.flip_prob, "synth.flip_prob");
    ov.set(&mut cfg.clip_secs, a.clip_secs, "synth.clip_secs");
    ov.set_some(&mut ctx.file.run.out, a.out, "run.out");
    let out = require(&ctx.file.run.out, "run.out", "--out")?.clone();
    cfg.validate()?;

    let synth = synth_generate(cfg)?;
    let paths = write_synth(&out, &synth)?;
    let features_dir = out.join("features");
    featurize_dir(&paths.audio_dir, &features_dir)?;
    let ceiling = subject_blind_ceiling(&synth.corpus.records);
    println!(
        "wrote {} subjects, {} records and {} clips to {} (subject-blind ceiling {ceiling:.4})",
        synth.corpus.subjects.len(),
        synth.corpus.records.len(),
        synth.clips.len(),
        out.display()
    );
    ctx.manifest.seed = Some(cfg.seed);
    ctx.manifest.artifacts = vec![paths.corpus, paths.pairs, paths.truth, paths.audio_dir, features_dir];
    ctx.manifest.summary = json!({
        "subjects": synth.corpus.subjects.len(),
        "records": synth.corpus.records.len(),
        "clips": synth.clips.len(),
        "subject_blind_ceiling": ceiling,
    });
    let config = json!({ "synth": ctx.file.synth, "run": ctx.file.run });
    ctx.finish(config, &out.join("manifest.json"))
}

fn train(ctx: &mut Ctx, a: TrainArgs) -> Result<()> {
    let (ov, file) = (&mut ctx.overrides, &mut ctx.file);
    apply_data(ov, &mut file.data, a.data);
    apply_model(ov, &mut file.model, a.model)?;
    apply_training(ov, &mut file.train, a.training);
    ov.set(&mut file.train.seed, a.seed, "train.seed");
    ov.set_some(&mut file.run.fold, a.fold, "run.fold");
    ov.set_some(&mut file.run.out, a.out, "run.out");
    let out = require(&file.run.out, "run.out", "--out")?.clone();
    let fold = file.run.fold.unwrap_or(1);
    let k = fold_index(fold)?;
    file.train.validate()?;

    let (corpus, store) = load_data(&file.data)?;
    let (kept, _) = filter_corpus(&corpus);
    let rot = make_folds(&kept.subjects)?.rotation(k)?;
    let mask = file.model.feature_mask;
    let train = training_examples(&kept, Some(&rot.train), mask)?;
    let val = training_examples(&kept, Some(&rot.val), mask)?;
    let test = training_examples(&kept, Some(&rot.test), mask)?;
    let outcome = train_model(&file.train, &file.model, &store, &train, &val)?;
    let test_accuracy = if test.is_empty() {
        None
    } else {
        Some(evaluate_accuracy(&outcome.model, &store, &test, outcome.frames)?)
    };
    outcome.model.save(&out)?;

    println!(
        "fold {fold}: best epoch {} of {}, val loss {:.4}, test accuracy {}",
        outcome.best_epoch,
        outcome.history.len(),
        outcome.best_val_loss,
        test_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"))
    );
    ctx.manifest.seed = Some(file.train.seed);
    ctx.manifest.artifacts = vec![out.clone(), sidecar_path(&out)];
    ctx.manifest.summary = json!({
        "fold": fold,
        "n_train": train.len(),
        "n_val": val.len(),
        "n_test": test.len(),
        "frames": outcome.frames,
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "epochs_run": outcome.history.len(),
        "stopped_early": outcome.stopped_early,
        "test_accuracy": test_accuracy,
        "history": outcome.history,
    });
    let config = json!({ "data": file.data, "run": file.run, "model": file.model, "train": file.train });
    ctx.finish(config, &RunManifest::path_for_file(&out))
}

fn cv(ctx: &mut Ctx, a: CvArgs) -> Result<()> {
    let (ov, file) = (&mut ctx.overrides, &mut ctx.file);
    apply_data(ov, &mut file.data, a.data);
    apply_model(ov, &mut file.model, a.model)?;
    apply_training(ov, &mut file.train, a.training);
    ov.set(&mut file.cv.runs, a.runs, "cv.runs");
    ov.set(&mut file.cv.base_seed, a.base_seed, "cv.base_seed");
    ov.set(&mut file.cv.jobs, a.jobs, "cv.jobs");
    let folds = a.folds.map(|f| parse_list(&f, "fold", |s| s.parse().ok())).transpose()?;
    ov.set_some(&mut file.cv.folds, folds, "cv.folds");
    ov.set_some(&mut file.run.out, a.out, "run.out");
    let out = require(&file.run.out, "run.out", "--out")?.clone();
    let opts = file.cv.options()?;
    file.train.validate()?;

    let (corpus, store) = load_data(&file.data)?;
    let report = run_cv_with(&corpus, &store, &file.model, &file.train, &opts, |c| {
        eprintln!(
            "fold {} run {}: accuracy {:.4} (best epoch {} of {})",
            c.fold_index + 1,
            c.run,
            c.accuracy,
            c.best_epoch,
            c.epochs_run
        );
    })?;
    let text = serde_json::to_string_pretty(&report).map_err(prefnet::Error::from)?;
    atomic_write(&out, text.as_bytes())?;
    print!("{}", report.table());

    ctx.manifest.seed = Some(file.cv.base_seed);
    ctx.manifest.artifacts = vec![out.clone()];
    ctx.manifest.summary = json!({
        "overall_accuracy": report.overall_accuracy,
        "folds": report.folds.iter().map(|f| json!({
            "fold": f.fold_index + 1, "n_questions": f.n_questions, "mean": f.mean, "std": f.std
        })).collect::<Vec<_>>(),
    });
    let config = json!({ "data": file.data, "run": file.run, "model": file.model, "train": file.train, "cv": file.cv });
    ctx.finish(config, &RunManifest::path_for_file(&out))
}

fn checkpoint_arg(ov: &mut Overrides, list: &mut Vec<PathBuf>, flag: Vec<PathBuf>) -> Result<()> {
    if !flag.is_empty() {
        *list = flag;
        ov.keys.push("run.checkpoints".into());
    }
    if list.is_empty() {
        return Err(CliError::Validation("missing --checkpoint (or `run.checkpoints` in the config file)".into()));
    }
    Ok(())
}

fn evaluate(ctx: &mut Ctx, a: EvaluateArgs) -> Result<()> {
    let (ov, file) = (&mut ctx.overrides, &mut ctx.file);
    apply_data(ov, &mut file.data, a.data);
    checkpoint_arg(ov, &mut file.run.checkpoints, a.checkpoint.into_iter().collect())?;
    ov.set_some(&mut file.run.fold, a.fold, "run.fold");
    ov.set_some(&mut file.train.crop_frames, a.crop_frames, "train.crop_frames");
    ov.set_some(&mut file.run.out, a.out, "run.out");
    let fold = file.run.fold.map(fold_index).transpose()?;

    let (corpus, store) = load_data(&file.data)?;
    let model = Model::<f32>::load(&file.run.checkpoints[0])?;
    let (kept, _) = filter_corpus(&corpus);
    let subjects = fold.map(|k| make_folds(&kept.subjects).and_then(|p| p.rotation(k))).transpose()?.map(|r| r.test);
    let examples = training_examples(&kept, subjects.as_deref(), model.config.feature_mask)?;
    if examples.is_empty() {
        return Err(CliError::Validation("no preference records to evaluate".into()));
    }
    let frames = window_frames(file.train.crop_frames, &store, &examples)?;
    let accuracy = evaluate_accuracy(&model, &store, &examples, frames)?;
    let result = json!({
        "checkpoint": file.run.checkpoints[0],
        "model": model.config.variant,
        "fold": file.run.fold,
        "n_questions": examples.len(),
        "frames": frames,
        "accuracy": accuracy,
    });
    println!("{}", serde_json::to_string_pretty(&result).map_err(prefnet::Error::from)?);
    if let Some(out) = file.run.out.clone() {
        atomic_write(&out, serde_json::to_string_pretty(&result).map_err(prefnet::Error::from)?.as_bytes())?;
        ctx.manifest.artifacts = vec![out.clone()];
        ctx.manifest.summary = result;
        let config = json!({ "data": file.data, "run": file.run, "train": { "crop_frames": file.train.crop_frames } });
        ctx.finish(config, &RunManifest::path_for_file(&out))?;
    }
    Ok(())
}

fn analyze(ctx: &mut Ctx, a: AnalyzeArgs) -> Result<()> {
    let (ov, file) = (&mut ctx.overrides, &mut ctx.file);
    checkpoint_arg(ov, &mut file.run.checkpoints, a.checkpoints)?;
    ov.set(&mut file.run.fold_bn, a.fold_bn.then_some(true), "run.fold_bn");
    ov.set_some(&mut file.run.out, a.out, "run.out");
    let out = require(&file.run.out, "run.out", "--out")?.clone();

    let analyses = file
        .run
        .checkpoints
        .iter()
        .map(|p| analyze_last_mlp(&Model::<f32>::load(p)?, file.run.fold_bn))
        .collect::<prefnet::Result<Vec<_>>>()?;
    let avg = WeightAnalysis::average(&analyses)?;
    atomic_write(&out, avg.to_csv().as_bytes())?;
    println!(
        "{} checkpoints: audio mean {:.6}, subject mean {:.6}",
        analyses.len(),
        avg.audio_mean(),
        avg.subject_mean()
    );
    ctx.manifest.artifacts = vec![out.clone()];
    ctx.manifest.summary = json!({
        "checkpoints": analyses.len(),
        "inputs": avg.values.len(),
        "audio_dim": avg.audio_dim,
        "audio_mean": avg.audio_mean(),
        "subject_mean": avg.subject_mean(),
    });
    let config = json!({ "run": file.run });
    ctx.finish(config, &RunManifest::path_for_file(&out))
}

fn serve_cmd(ctx: &mut Ctx, a: ServeArgs) -> Result<()> {
    let (ov, cfg) = (&mut ctx.overrides, &mut ctx.file.serve);
    ov.set(&mut cfg.host, a.host, "serve.host");
    ov.set(&mut cfg.port, a.port, "serve.port");
    ov.set_some(&mut cfg.audio_dir, a.audio_dir, "serve.audio_dir");
    ov.set(&mut cfg.log, a.log, "serve.log");
    ov.set_some(&mut cfg.plan, a.plan, "serve.plan");
    ov.set(&mut cfg.seed, a.seed, "serve.seed");
    let audio = require(&cfg.audio_dir, "serve.audio_dir", "--audio-dir")?.clone();
    if !audio.is_dir() {
        return Err(CliError::Validation(format!("{} is not a directory", audio.display())));
    }
    let service = Service::open(&cfg.log, || match &cfg.plan {
        Some(p) => load_plan(p),
        None => plan_from_audio_dir(&audio, cfg.seed),
    })?;

    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("starting runtime: {e}")))?;
    let addr = format!("{}:{}", cfg.host, cfg.port);
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind(&addr))
        .map_err(|e| CliError::Runtime(format!("binding {addr}: {e}")))?;
    let local = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;

    ctx.manifest.seed = Some(cfg.seed);
    ctx.manifest.artifacts = vec![cfg.log.clone()];
    ctx.manifest.summary = json!({ "address": local.to_string() });
    ctx.manifest.config = json!({ "serve": cfg });
    ctx.manifest.flag_overrides = std::mem::take(&mut ov.keys);
    ctx.manifest.write(&RunManifest::path_for_file(&cfg.log), false)?;

    println!("listening on http://{local}");
    let _ = std::io::stdout().flush();
    runtime
        .block_on(serve(listener, router(Arc::new(service), audio)))
        .map_err(|e| CliError::Runtime(format!("server: {e}")))
}

fn export(ctx: &mut Ctx, a: ExportArgs) -> Result<()> {
    let file = &mut ctx.file;
    ctx.overrides.set(&mut file.serve.log, a.log, "serve.log");
    ctx.overrides.set_some(&mut file.run.out, a.out, "run.out");
    let out = require(&file.run.out, "run.out", "--out")?.clone();
    let corpus = Service::export_log(&file.serve.log)?;
    write_corpus(&out, &corpus)?;
    println!("exported {} subjects and {} records to {}", corpus.subjects.len(), corpus.records.len(), out.display());
    ctx.manifest.artifacts = vec![out.clone()];
    ctx.manifest.summary = json!({ "subjects": corpus.subjects.len(), "records": corpus.records.len() });
    let config = json!({ "serve": { "log": file.serve.log }, "run": { "out": file.run.out } });
    ctx.finish(config, &RunManifest::path_for_file(&out))
}
