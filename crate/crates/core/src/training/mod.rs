//! Loss, optimizers, the training loop, evaluation and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{adam_step, sgd_momentum_step, AdamHyper, OptimState, OptimizerKind};

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{ClipRecord, DatasetManifest, SplitName, SplitSpec, WindowMode};
use crate::error::{config_err, contract_err, Error, Result};
use crate::graph::Graph;
use crate::models::{argmax, ClassDistribution, Model, ModelConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::scalar::Scalar;
use crate::vision::Frame;
use crate::Var;

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln(max(p[label], 1e-12))`
pub fn cross_entropy(d: &ClassDistribution, label: usize) -> Result<f64> {
    let p = d.probs().get(label).ok_or_else(|| contract_err!("label {label} out of range for {} classes", d.len()))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Cross-entropy of `1×C` logits against `label`, as a graph scalar.
pub fn cross_entropy_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, label: usize) -> Result<Var> {
    let probs = g.softmax_rows(logits)?;
    g.neg_log_pick(probs, label, S::lit(PROB_FLOOR))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// SGD momentum coefficient.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    pub seed: u64,
    /// Single-threaded, fixed-order run; wall-clock is kept out of the metrics.
    pub deterministic: bool,
    /// Steps between validations; 0 validates once per epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            batch_size: 8,
            epochs: 10,
            max_steps: None,
            clip_norm: 5.0,
            seed: 0,
            deterministic: true,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(config_err!("adam hyperparameters out of range"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must lie in [0, 1)"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(config_err!("gradient clip norm must be positive"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps completed by the end of the epoch.
    pub steps: usize,
    pub train_loss: f64,
    /// Accuracy of the training-time predictions (random windows).
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Accuracy and confusion over one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub split: SplitName,
    pub context: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    /// Clips shorter than the context length.
    pub skipped_short: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub model: String,
    pub context: usize,
    pub epochs: Vec<EpochMetrics>,
    /// Mean batch loss after every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub skipped_short: usize,
    pub test: Option<EvalMetrics>,
    /// Omitted in deterministic mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

/// Evaluates `predict` on the center window of every clip in `indices`.
pub fn evaluate_with<F>(
    manifest: &DatasetManifest,
    indices: &[usize],
    split: SplitName,
    context: usize,
    mut predict: F,
) -> Result<EvalMetrics>
where
    F: FnMut(&ClipRecord, &[Frame<f32>]) -> Result<usize>,
{
    let k = manifest.num_classes();
    let mut confusion = vec![vec![0; k]; k];
    let mut skipped = 0;
    for &i in indices {
        let rec = &manifest.records[i];
        if rec.len() < context {
            skipped += 1;
            continue;
        }
        let clip = rec.window::<f32>(context, WindowMode::Center)?;
        let p = predict(rec, &clip)?;
        if p >= k || rec.label >= k {
            return Err(contract_err!("prediction {p} or label {} outside {k} classes", rec.label));
        }
        confusion[rec.label][p] += 1;
    }
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(EvalMetrics {
        split,
        context,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        confusion,
        skipped_short: skipped,
    })
}

fn check_compatible(config: &ModelConfig, manifest: &DatasetManifest) -> Result<()> {
    if manifest.num_classes() != config.num_classes {
        return Err(config_err!(
            "dataset has {} classes, model expects {}",
            manifest.num_classes(),
            config.num_classes
        ));
    }
    if let Some(r) = manifest.records.iter().find(|r| r.shape != config.frame_shape) {
        return Err(config_err!(
            "clip {} has frame shape {:?}, model expects {:?}",
            r.rel_path(),
            r.shape,
            config.frame_shape
        ));
    }
    Ok(())
}

/// Evaluates `model` on one split with center windows of `context` frames.
pub fn evaluate(
    model: &Model<f32>,
    manifest: &DatasetManifest,
    split: &SplitSpec,
    which: SplitName,
    context: usize,
) -> Result<EvalMetrics> {
    check_compatible(model.config(), manifest)?;
    if context != model.config().context {
        return Err(config_err!("context {context} does not match the model's {}", model.config().context));
    }
    let indices = split.indices(manifest, which);
    evaluate_with(manifest, &indices, which, context, |_, clip| Ok(argmax(model.logits(clip)?.data())))
}

/// Forward + backward for one clip; gradients (scaled by `weight`) are
/// added to `store`. Returns the unscaled loss and the predicted class.
fn accumulate_clip(
    model: &Model<f32>,
    store: &mut ParamStore<f32>,
    clip: &[Frame<f32>],
    label: usize,
    weight: f32,
    reached: &mut BTreeSet<String>,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let logits = model.forward_logits(&mut g, store, clip)?;
    let pred = argmax(g.value(logits).data());
    let loss = cross_entropy_loss(&mut g, logits, label)?;
    let value = g.value(loss).data()[0].as_f64();
    let scaled = g.scale(loss, weight);
    let grads = g.backward(scaled)?;
    reached.extend(grads.reached_params().map(str::to_string));
    grads.accumulate_into(store)?;
    Ok((value, pred))
}

/// Trains a freshly initialized model and returns the checkpoint with the
/// best validation accuracy (ties go to the earlier epoch; without a
/// validation split, the final parameters) together with the run history.
pub fn train(
    model_config: &ModelConfig,
    manifest: &DatasetManifest,
    split: &SplitSpec,
    config: &TrainConfig,
) -> Result<(Checkpoint, Metrics)> {
    let started = Instant::now();
    model_config.validate()?;
    config.validate()?;
    check_compatible(model_config, manifest)?;
    let context = model_config.context;
    let all_train = split.indices(manifest, SplitName::Train);
    if all_train.is_empty() {
        return Err(contract_err!("the train split is empty"));
    }
    let train_idx: Vec<usize> = all_train.iter().copied().filter(|&i| manifest.records[i].len() >= context).collect();
    let skipped = all_train.len() - train_idx.len();
    if train_idx.is_empty() {
        return Err(contract_err!("every training clip is shorter than the context length {context}"));
    }
    let val_idx = split.indices(manifest, SplitName::Val);

    let mut model = Model::<f32>::new(model_config.clone())?;
    let mut state = OptimState::new(config.optimizer, model.params());
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let mut order_rng = rng::derived(config.seed, "shuffle");
    let mut step = 0usize;
    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>, OptimState<f32>)> = None;

    let validate = |model: &Model<f32>| -> Result<Option<f64>> {
        if val_idx.is_empty() {
            return Ok(None);
        }
        let m = evaluate_with(manifest, &val_idx, SplitName::Val, context, |_, clip| {
            Ok(argmax(model.logits(clip)?.data()))
        })?;
        Ok(Some(m.accuracy))
    };

    for epoch in 0..config.epochs {
        if step >= max_steps {
            break;
        }
        let mut order = train_idx.clone();
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut seen, mut correct) = (0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            if step >= max_steps {
                break;
            }
            let mut store = std::mem::take(model.params_mut());
            store.zero_grad();
            let weight = 1.0 / batch.len() as f32;
            let mut reached = BTreeSet::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let rec = &manifest.records[i];
                let window_seed = config.seed ^ ((step as u64) << 32) ^ i as u64;
                let clip =
                    rec.window::<f32>(context, WindowMode::Random(rng::derived(window_seed, "window").next_u64()))?;
                let (loss, pred) = accumulate_clip(&model, &mut store, &clip, rec.label, weight, &mut reached)
                    .map_err(|e| match e {
                        Error::Numeric(_) => Error::Divergence { step, loss: f64::NAN },
                        e => e,
                    })?;
                batch_loss += loss;
                correct += usize::from(pred == rec.label);
            }
            *model.params_mut() = store;
            let mean = batch_loss / batch.len() as f64;
            if !mean.is_finite() || !model.params().grad_norm().is_finite() {
                return Err(Error::Divergence { step, loss: mean });
            }
            let params = model.params_mut();
            params.clip_grad_norm(config.clip_norm as f32);
            match config.optimizer {
                OptimizerKind::Adam => adam_step(params, &mut state, &config.adam(), Some(&reached)),
                OptimizerKind::SgdMomentum => {
                    sgd_momentum_step(params, &mut state, config.lr, config.momentum, Some(&reached))
                }
            }
            step += 1;
            step_losses.push(mean);
            loss_sum += batch_loss;
            seen += batch.len();
            if config.eval_every > 0 && step.is_multiple_of(config.eval_every) {
                if let Some(acc) = validate(&model)? {
                    consider(&mut best, acc, epoch, &model, &state);
                }
            }
        }
        if seen == 0 {
            break;
        }
        let val_accuracy = validate(&model)?;
        if let Some(acc) = val_accuracy {
            consider(&mut best, acc, epoch, &model, &state);
        }
        epochs.push(EpochMetrics {
            epoch,
            steps: step,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_accuracy,
        });
    }

    let (best_epoch, best_val_accuracy) = match best {
        Some((acc, epoch, params, st)) => {
            *model.params_mut() = params;
            state = st;
            (Some(epoch), Some(acc))
        }
        None => (epochs.last().map(|e| e.epoch), None),
    };
    model.params_mut().zero_grad();

    let test_idx = split.indices(manifest, SplitName::Test);
    let test = if test_idx.is_empty() {
        None
    } else {
        Some(evaluate_with(manifest, &test_idx, SplitName::Test, context, |_, clip| {
            Ok(argmax(model.logits(clip)?.data()))
        })?)
    };

    let metrics = Metrics {
        model: model_config.kind.to_string(),
        context,
        epochs,
        step_losses,
        best_epoch,
        best_val_accuracy,
        skipped_short: skipped,
        test,
        wall_clock_seconds: (!config.deterministic).then(|| started.elapsed().as_secs_f64()),
    };
    let checkpoint = Checkpoint {
        model: model_config.clone(),
        train: Some(config.clone()),
        split: Some(split.clone()),
        params: model.into_params(),
        optim: Some(state),
    };
    Ok((checkpoint, metrics))
}

/// Keeps the first epoch reaching the highest validation accuracy.
fn consider(
    best: &mut Option<(f64, usize, ParamStore<f32>, OptimState<f32>)>,
    acc: f64,
    epoch: usize,
    model: &Model<f32>,
    state: &OptimState<f32>,
) {
    if best.as_ref().is_none_or(|(b, ..)| acc > *b) {
        let mut params = model.params().clone();
        params.zero_grad();
        *best = Some((acc, epoch, params, state.clone()));
    }
}
