//! The domain-extension transfer workflow: pretrain on the binary source
//! task, replace the classifier head, freeze everything below the last
//! convolutional block, and fine-tune on the four-class target task.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{augment, balanced_holdout, AugmentationPolicy, LabeledDataset};
use crate::data::{SOURCE_CLASSES, TARGET_CLASSES};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::ModelGraph;
use crate::optim::{CosineSchedule, Optimizer};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;

/// Role of a task in the transfer pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskRole {
    Source,
    Target,
}

/// A task: its role, ordered label space, and a free-text domain note.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub role: TaskRole,
    pub classes: Vec<String>,
    pub note: String,
}

impl TaskSpec {
    /// The binary screening task the trunk is pretrained on.
    pub fn source() -> Self {
        TaskSpec {
            role: TaskRole::Source,
            classes: SOURCE_CLASSES.iter().map(|s| s.to_string()).collect(),
            note: "binary screening over grayscale chest images".into(),
        }
    }

    /// The four-class target task. Its domain extends the source domain:
    /// the same grayscale image space, with a label space that widens from
    /// screening to differential classes.
    pub fn target() -> Self {
        TaskSpec {
            role: TaskRole::Target,
            classes: TARGET_CLASSES.iter().map(|s| s.to_string()).collect(),
            note: "four-class differential task; domain extends the binary source domain \
                   over the same grayscale image space"
                .into(),
        }
    }

    /// A target task over a dataset's label space (for non-standard class
    /// sets in tests and tooling).
    pub fn target_for(dataset: &LabeledDataset) -> Self {
        TaskSpec {
            role: TaskRole::Target,
            classes: dataset.class_names().to_vec(),
            note: "target task derived from dataset class names".into(),
        }
    }
}

/// Per-epoch training history of one run.
#[derive(Debug, Clone)]
pub struct TrainRunReport {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    /// Empty when the run had no validation set.
    pub val_accuracy: Vec<f64>,
    /// Epoch achieving the maximum validation accuracy (train accuracy when
    /// no validation set was used); earliest epoch wins ties.
    pub best_epoch: usize,
    pub wall_time_secs: f64,
}

/// Source-task pretraining settings.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate of the cosine schedule.
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_epsilon: f32,
    /// Balanced holdout drawn from the dataset before training.
    pub val_per_class: usize,
    pub augment: Option<AugmentationPolicy>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            batch_size: 32,
            lr_max: 1e-3,
            lr_min: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            val_per_class: 80,
            augment: Some(AugmentationPolicy::default()),
            seed: 0,
        }
    }
}

/// Target-task fine-tuning settings. The learning rate is constant; no
/// schedule applies during transfer.
#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub augment: Option<AugmentationPolicy>,
    /// Track validation accuracy every epoch (when a validation set exists).
    pub eval_each_epoch: bool,
    /// Return the best-validation-epoch weights instead of the final ones.
    pub retain_best: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            momentum: 0.9,
            augment: Some(AugmentationPolicy::default()),
            eval_each_epoch: true,
            retain_best: false,
            seed: 0,
        }
    }
}

/// Train the source model from scratch with Adam under cosine annealing,
/// keeping the weights of the epoch with the best holdout accuracy.
pub fn pretrain(
    model: ModelGraph,
    data: &LabeledDataset,
    config: &PretrainConfig,
) -> Result<(ModelGraph, TrainRunReport)> {
    if model.class_count() != 2 {
        return Err(Error::Config(format!(
            "pretraining expects a 2-class model, got {}",
            model.class_count()
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(p) = &config.augment {
        p.validate()?;
    }
    let (train, val) = balanced_holdout(data, config.val_per_class, config.seed)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let schedule = CosineSchedule::new(config.lr_max, config.lr_min, config.epochs)?;
    let optimizer = Optimizer::adam(
        config.lr_max as f32,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
    )?
    .with_schedule(schedule);

    let loop_config = LoopConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        augment: config.augment.clone(),
        seed: config.seed,
        eval_each_epoch: true,
        retain_best: true,
    };
    let val_ref = if val.is_empty() { None } else { Some(&val) };
    run_training(model, optimizer, &train, val_ref, &loop_config)
}

/// Instantiate the transferred model: load the source weights, replace the
/// classifier head for the target label space, and freeze every block below
/// the last convolutional block.
pub fn adapt(source: &ModelGraph, target: &TaskSpec, seed: u64) -> Result<ModelGraph> {
    if target.classes.len() < 2 {
        return Err(Error::Config(
            "target task needs at least 2 classes".into(),
        ));
    }
    let last_conv_block = source
        .last_conv_block_id()
        .ok_or_else(|| Error::Config("model has no convolutional layers".into()))?;
    let mut model = source.replace_head(target.classes.len(), seed)?;
    model.set_trainable_from_block(last_conv_block)?;
    Ok(model)
}

/// Fine-tune the trainable layers with constant-rate SGD momentum. Frozen
/// parameters are never updated. `val` is the held-out fold when run under
/// cross-validation.
pub fn finetune(
    model: ModelGraph,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    config: &FinetuneConfig,
) -> Result<(ModelGraph, TrainRunReport)> {
    if model.trainable_param_count() == 0 {
        return Err(Error::Config("model has no trainable parameters".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(p) = &config.augment {
        p.validate()?;
    }
    let optimizer = Optimizer::sgd_momentum(config.lr, config.momentum)?;
    let loop_config = LoopConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        augment: config.augment.clone(),
        seed: config.seed,
        eval_each_epoch: config.eval_each_epoch,
        retain_best: config.retain_best,
    };
    run_training(model, optimizer, train, val, &loop_config)
}

struct LoopConfig {
    epochs: usize,
    batch_size: usize,
    augment: Option<AugmentationPolicy>,
    seed: u64,
    eval_each_epoch: bool,
    retain_best: bool,
}

fn run_training(
    mut model: ModelGraph,
    mut optimizer: Optimizer,
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    config: &LoopConfig,
) -> Result<(ModelGraph, TrainRunReport)> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let started = Instant::now();
    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut train_accuracy = Vec::with_capacity(config.epochs);
    let mut val_accuracy = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelGraph)> = None;

    for epoch in 0..config.epochs {
        optimizer.begin_epoch(epoch)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from(config.seed, &[stream::SHUFFLE, epoch as u64]));

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (batch, labels) = assemble_batch(train, chunk, config.augment.as_ref(), epoch)?;
            let mut run = model.run_forward(&batch)?;
            let (loss, probs) = run.tape.softmax_cross_entropy(run.logits, &labels)?;
            let loss_value = run.tape.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: loss_value,
                });
            }
            run.tape.backward(loss)?;
            run.harvest_grads(&mut model);
            optimizer.step(&mut model)?;
            model.zero_grad();

            loss_sum += f64::from(loss_value) * chunk.len() as f64;
            correct += count_correct(&probs, &labels);
        }
        train_loss.push(loss_sum / train.len() as f64);
        train_accuracy.push(correct as f64 / train.len() as f64);

        let epoch_metric = match val {
            Some(val) if config.eval_each_epoch => {
                let acc = eval::evaluate(&model, val)?.accuracy();
                val_accuracy.push(acc);
                acc
            }
            _ => *train_accuracy.last().expect("pushed above"),
        };
        let improved = best
            .as_ref()
            .map(|(metric, _, _)| epoch_metric > *metric)
            .unwrap_or(true);
        if improved {
            best = Some((epoch_metric, epoch, model.clone()));
        }
    }

    let (_, best_epoch, best_model) = best.ok_or(Error::Config("training needs at least one epoch".into()))?;
    let report = TrainRunReport {
        train_loss,
        train_accuracy,
        val_accuracy,
        best_epoch,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let final_model = if config.retain_best { best_model } else { model };
    Ok((final_model, report))
}

/// Stack samples (optionally augmented with per-(epoch, index) draws) into
/// an NCHW batch.
fn assemble_batch(
    data: &LabeledDataset,
    indices: &[usize],
    augment_policy: Option<&AugmentationPolicy>,
    epoch: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let first = &data.samples()[indices[0]];
    let shape = first.image.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut pixels = Vec::with_capacity(indices.len() * h * w);
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in indices {
        let sample = &data.samples()[idx];
        labels.push(sample.label);
        match augment_policy {
            Some(policy) => {
                let transformed = augment(sample, &policy.draw_for(epoch, idx));
                pixels.extend_from_slice(transformed.image.data());
            }
            None => pixels.extend_from_slice(sample.image.data()),
        }
    }
    Ok((
        Tensor::from_vec(&[indices.len(), 1, h, w], pixels)?,
        labels,
    ))
}

fn count_correct(probs: &Tensor, labels: &[usize]) -> usize {
    let (bsz, classes) = probs.dims2().expect("probabilities are 2-d");
    let mut correct = 0;
    for (b, &label) in labels.iter().enumerate().take(bsz) {
        let row = &probs.data()[b * classes..(b + 1) * classes];
        let mut arg = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
        }
        if arg == label {
            correct += 1;
        }
    }
    correct
}

/// Build a fresh sample batch for quick smoke checks.
#[doc(hidden)]
pub fn toy_batch(data: &LabeledDataset, n: usize) -> Result<(Tensor, Vec<usize>)> {
    let indices: Vec<usize> = (0..n.min(data.len())).collect();
    assemble_batch(data, &indices, None, 0)
}

/// Derive the per-fold seed used by cross-validation.
pub fn fold_seed(base: u64, fold: usize) -> u64 {
    derive_seed(base, &[stream::FOLD, fold as u64])
}
