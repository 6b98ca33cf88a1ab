use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::data::FeatureStore;
use super::fit::{evaluate_accuracy, train_model};
use super::TrainConfig;
use crate::dataset::{filter_corpus, make_folds, training_examples, Corpus, ExclusionReport, TrainingExample};
use crate::models::ModelConfig;
use crate::{Error, Result};

/// Seed of run `run` under base seed `base`.
pub fn run_seed(base: u64, run: usize) -> u64 {
    base.wrapping_mul(1000).wrapping_add(run as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// 0-based test fold.
    pub fold_index: usize,
    /// Test questions in the fold.
    pub n_questions: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
}

impl FoldResult {
    pub fn from_runs(fold_index: usize, n_questions: usize, accuracies: Vec<f64>) -> Self {
        let n = accuracies.len().max(1) as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        FoldResult { fold_index, n_questions, accuracies, mean, std }
    }
}

/// `Σ mean_k·Q_k / Σ Q_k`.
pub fn weighted_overall(folds: &[FoldResult]) -> f64 {
    let q: usize = folds.iter().map(|f| f.n_questions).sum();
    if q == 0 {
        return 0.0;
    }
    folds.iter().map(|f| f.mean * f.n_questions as f64).sum::<f64>() / q as f64
}

/// One trained-and-tested (fold, run) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub fold_index: usize,
    pub run: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub n_test: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub runs: usize,
    pub base_seed: u64,
    pub exclusion: ExclusionReport,
    pub folds: Vec<FoldResult>,
    pub overall_accuracy: f64,
    pub cells: Vec<CellResult>,
}

impl ExperimentReport {
    /// Plain-text table: one `fold (#Q)  mean ± std` row per fold and the
    /// weighted overall.
    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {}\n", "Fold (#Q)", self.model.variant);
        for f in &self.folds {
            out.push_str(&format!(
                "{:<12} {:.4} ± {:.4}\n",
                format!("{} ({})", f.fold_index + 1, f.n_questions),
                f.mean,
                f.std
            ));
        }
        out.push_str(&format!("{:<12} {:.4}\n", "Overall", self.overall_accuracy));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvOptions {
    pub runs: usize,
    pub base_seed: u64,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
    /// Test folds to run (all when `None`).
    pub folds: Option<Vec<usize>>,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions { runs: 21, base_seed: 0, jobs: 1, folds: None }
    }
}

struct Split {
    fold: usize,
    train: Vec<TrainingExample>,
    val: Vec<TrainingExample>,
    test: Vec<TrainingExample>,
}

pub fn run_cv(
    corpus: &Corpus,
    store: &FeatureStore,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &CvOptions,
) -> Result<ExperimentReport> {
    run_cv_with(corpus, store, model_cfg, train_cfg, opts, |_| {})
}

/// [`run_cv`] with a callback invoked (from worker threads) as each cell
/// finishes.
pub fn run_cv_with(
    corpus: &Corpus,
    store: &FeatureStore,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &CvOptions,
    progress: impl Fn(&CellResult) + Sync,
) -> Result<ExperimentReport> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if opts.runs == 0 {
        return Err(Error::Validation("runs must be at least 1".into()));
    }
    let (kept, exclusion) = filter_corpus(corpus);
    let plan = make_folds(&kept.subjects)?;
    let folds: Vec<usize> = match &opts.folds {
        Some(f) => f.clone(),
        None => (0..plan.num_folds).collect(),
    };
    let mut splits = Vec::new();
    for &k in &folds {
        let rot = plan.rotation(k)?;
        let mask = model_cfg.feature_mask;
        splits.push(Split {
            fold: k,
            train: training_examples(&kept, Some(&rot.train), mask)?,
            val: training_examples(&kept, Some(&rot.val), mask)?,
            test: training_examples(&kept, Some(&rot.test), mask)?,
        });
    }

    let cells: Vec<(usize, usize)> = (0..splits.len()).flat_map(|s| (0..opts.runs).map(move |r| (s, r))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(s, run)) = cells.get(i) else { break };
        let split = &splits[s];
        let seed = run_seed(opts.base_seed, run);
        let cfg = TrainConfig { seed, ..train_cfg.clone() };
        let cell = train_model(&cfg, model_cfg, store, &split.train, &split.val).and_then(|out| {
            Ok(CellResult {
                fold_index: split.fold,
                run,
                seed,
                accuracy: evaluate_accuracy(&out.model, store, &split.test, out.frames)?,
                n_test: split.test.len(),
                best_epoch: out.best_epoch,
                epochs_run: out.history.len(),
                best_val_loss: out.best_val_loss,
            })
        });
        if let Ok(c) = &cell {
            progress(c);
        }
        results.lock().expect("no worker panicked")[i] = Some(cell);
    };
    std::thread::scope(|scope| {
        for _ in 1..opts.jobs.max(1).min(cells.len()) {
            scope.spawn(worker);
        }
        worker();
    });

    let cells: Vec<CellResult> = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect::<Result<_>>()?;
    let fold_results: Vec<FoldResult> = splits
        .iter()
        .map(|split| {
            let accs = cells.iter().filter(|c| c.fold_index == split.fold).map(|c| c.accuracy).collect();
            FoldResult::from_runs(split.fold, split.test.len(), accs)
        })
        .collect();
    Ok(ExperimentReport {
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        runs: opts.runs,
        base_seed: opts.base_seed,
        exclusion,
        overall_accuracy: weighted_overall(&fold_results),
        folds: fold_results,
        cells,
    })
}
