use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{make_batch, Cropping, FeatureStore, PairBatch};
use super::TrainConfig;
use crate::dataset::TrainingExample;
use crate::models::{Model, ModelConfig};
use crate::tensor::{AdamConfig, AdamState, Graph, Mode, Scalar};
use crate::{Error, Result};

/// Patience-based early stopping on a loss to be minimised.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::INFINITY, best_epoch: None, stale: 0 }
    }

    /// Records one epoch's loss. Returns `true` when it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Window length used for training and evaluation.
    pub frames: usize,
}

/// Drives epochs with learning-rate decay and early stopping. `epoch_fn`
/// trains one epoch (0-based index, learning rate) and returns
/// `(train_loss, val_loss)`; `on_best` is called whenever the validation
/// loss reaches a new minimum.
pub fn fit_loop<S>(
    cfg: &TrainConfig,
    state: &mut S,
    mut epoch_fn: impl FnMut(&mut S, usize, f64) -> Result<(f64, f64)>,
    mut on_best: impl FnMut(&mut S, usize),
) -> Result<(Vec<EpochRecord>, EarlyStopper)> {
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::new();
    for e in 0..cfg.max_epochs {
        let lr = cfg.lr(e);
        let (train_loss, val_loss) = epoch_fn(state, e, lr)?;
        if !val_loss.is_finite() {
            return Err(Error::Validation(format!("validation loss became {val_loss} at epoch {}", e + 1)));
        }
        let improved = stopper.observe(e + 1, val_loss);
        if improved {
            on_best(state, e + 1);
        }
        history.push(EpochRecord { epoch: e + 1, lr, train_loss, val_loss, improved });
        if stopper.should_stop() {
            break;
        }
    }
    Ok((history, stopper))
}

fn batches<'a>(examples: &'a [TrainingExample], order: &[usize], size: usize) -> Vec<Vec<&'a TrainingExample>> {
    order.chunks(size).map(|c| c.iter().map(|&i| &examples[i]).collect()).collect()
}

fn batch_loss<T: Scalar>(model: &Model<T>, batch: PairBatch<T>, mode: Mode) -> Result<(Graph<T>, crate::tensor::Var)> {
    let mut g = Graph::new();
    let a = g.input(batch.a);
    let b = g.input(batch.b);
    let s = g.input(batch.subjects);
    let probs = model.siamese(&mut g, a, b, s, mode)?;
    let loss = g.nll_loss(probs, &batch.labels)?;
    Ok((g, loss))
}

/// Pair-softmax probabilities `[p_first, p_second]` per example, in
/// inference mode with centred windows.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    store: &FeatureStore,
    examples: &[TrainingExample],
    frames: usize,
    batch_size: usize,
) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(examples.len());
    let order: Vec<usize> = (0..examples.len()).collect();
    for chunk in batches(examples, &order, batch_size.max(1)) {
        let batch = make_batch::<T, ChaCha8Rng>(store, &chunk, frames, Cropping::Eval)?;
        let mut g = Graph::new();
        let a = g.input(batch.a);
        let b = g.input(batch.b);
        let s = g.input(batch.subjects);
        let p = model.siamese(&mut g, a, b, s, Mode::Eval)?;
        out.extend(g.data(p).chunks(2).map(|r| [r[0].to_f64_lossy(), r[1].to_f64_lossy()]));
    }
    Ok(out)
}

/// Correct iff the preferred clip gets strictly the larger probability.
pub fn accuracy_from_probs(probs: &[[f64; 2]], labels: &[usize]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| match l {
            0 => p[0] > p[1],
            _ => p[1] > p[0],
        })
        .count();
    correct as f64 / probs.len() as f64
}

pub fn evaluate_accuracy<T: Scalar>(
    model: &Model<T>,
    store: &FeatureStore,
    examples: &[TrainingExample],
    frames: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let probs = predict(model, store, examples, frames, 64)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Ok(accuracy_from_probs(&probs, &labels))
}

/// Mean NLL in inference mode with centred windows.
pub fn mean_loss<T: Scalar>(
    model: &Model<T>,
    store: &FeatureStore,
    examples: &[TrainingExample],
    frames: usize,
    batch_size: usize,
) -> Result<f64> {
    let order: Vec<usize> = (0..examples.len()).collect();
    let mut total = 0.0;
    for chunk in batches(examples, &order, batch_size.max(1)) {
        let n = chunk.len();
        let batch = make_batch::<T, ChaCha8Rng>(store, &chunk, frames, Cropping::Eval)?;
        let (g, loss) = batch_loss(model, batch, Mode::Eval)?;
        total += g.data(loss)[0].to_f64_lossy() * n as f64;
    }
    Ok(total / examples.len() as f64)
}

struct Fitting {
    model: Model<f32>,
    best: crate::tensor::ParamStore<f32>,
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    sample_index: u64,
    order: Vec<usize>,
}

/// Trains from a fresh initialisation seeded by `cfg.seed` and returns the
/// parameters of the best validation epoch.
pub fn train_model(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    store: &FeatureStore,
    train: &[TrainingExample],
    val: &[TrainingExample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "training needs non-empty train and validation sets (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    let frames = match cfg.crop_frames {
        Some(f) => f,
        None => store.min_frames(train)?.min(store.min_frames(val)?),
    };
    let model = Model::<f32>::init(model_cfg.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut st = Fitting {
        best: model.params.clone(),
        model,
        adam: AdamState::new(AdamConfig { lr: cfg.lr0, ..Default::default() }),
        rng,
        sample_index: 0,
        order: (0..train.len()).collect(),
    };

    let (history, stopper) = fit_loop(
        cfg,
        &mut st,
        |st, _, lr| {
            st.adam.set_lr(lr);
            st.order.shuffle(&mut st.rng);
            let mut total = 0.0;
            for chunk in batches(train, &st.order, cfg.batch_size) {
                let n = chunk.len();
                let batch = make_batch(
                    store,
                    &chunk,
                    frames,
                    Cropping::Train {
                        rng: &mut st.rng,
                        augment: &cfg.augment,
                        seed: cfg.seed,
                        sample_index: &mut st.sample_index,
                    },
                )?;
                let (mut g, loss) = batch_loss(&st.model, batch, Mode::Train)?;
                total += g.data(loss)[0] as f64 * n as f64;
                g.backward(loss)?;
                st.adam.step(&mut st.model.params, &g.param_grads())?;
                st.model.params.apply_running_updates(g.take_running_updates())?;
            }
            let val_loss = mean_loss(&st.model, store, val, frames, cfg.batch_size)?;
            Ok((total / train.len() as f64, val_loss))
        },
        |st, _| st.best = st.model.params.clone(),
    )?;
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    let mut model = st.model;
    model.params = st.best;
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_loss,
        stopped_early: history.len() < cfg.max_epochs,
        history,
        frames,
    })
}
