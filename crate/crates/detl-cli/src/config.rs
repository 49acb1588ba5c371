//! Run configuration: `key = value` lines with `#` comments. Every key has
//! a default, unknown keys are rejected, and the effective configuration is
//! echoed into the run directory.

use std::path::Path;

use detl_core::data::{AugmentationPolicy, TaskKind};
use detl_core::rng::{derive_seed, stream};
use detl_core::transfer::{FinetuneConfig, PretrainConfig};
use detl_core::PresetName;

use crate::error::{CliError, Result};

/// All tunables of the pipeline, command-scoped by prefix.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub arch: PresetName,
    pub image_size: usize,
    pub width_base: usize,
    pub seed: u64,

    // gen-data
    pub task: TaskKind,
    pub counts: Vec<usize>,

    // pretraining
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_epsilon: f32,
    pub val_per_class: usize,

    // augmentation
    pub augment: bool,
    pub rotation_deg: f32,
    pub scale_min: f32,
    pub scale_max: f32,
    pub mirror_prob: f32,

    // fine-tuning / cross-validation
    pub finetune_epochs: usize,
    pub finetune_lr: f32,
    pub momentum: f32,
    pub finetune_augment: bool,
    pub finetune_eval_each_epoch: bool,
    pub finetune_retain_best: bool,
    pub folds: usize,

    // grad-check
    pub grad_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: PresetName::MiniVgg,
            image_size: 64,
            width_base: 4,
            seed: 7,
            task: TaskKind::FourClass,
            counts: vec![350, 322, 300, 305],
            epochs: 100,
            batch_size: 32,
            lr_max: 1e-3,
            lr_min: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            val_per_class: 80,
            augment: true,
            rotation_deg: 15.0,
            scale_min: 0.9,
            scale_max: 1.1,
            mirror_prob: 0.5,
            finetune_epochs: 50,
            finetune_lr: 1e-4,
            momentum: 0.9,
            finetune_augment: true,
            finetune_eval_each_epoch: true,
            finetune_retain_best: false,
            folds: 5,
            grad_tolerance: 1e-3,
        }
    }
}

impl RunConfig {
    /// Load from a config file, if given, then apply `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut config = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            config.apply_text(&text)?;
        }
        for entry in overrides {
            let (key, value) = entry.split_once('=').ok_or_else(|| {
                CliError::Config(format!("override `{entry}` is not of the form key=value"))
            })?;
            config.apply(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("config line {}: expected `key = value`", idx + 1))
            })?;
            self.apply(key.trim(), value.trim())
                .map_err(|e| CliError::Config(format!("config line {}: {e}", idx + 1)))?;
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| CliError::Config(format!("invalid value `{value}` for key `{key}`")))
        }
        match key {
            "arch" => {
                self.arch = value
                    .parse()
                    .map_err(|e| CliError::Config(format!("{e}")))?
            }
            "image_size" => self.image_size = parse(key, value)?,
            "width_base" => self.width_base = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "task" => {
                self.task = match value {
                    "binary" => TaskKind::Binary,
                    "four" => TaskKind::FourClass,
                    other => {
                        return Err(CliError::Config(format!(
                            "task must be `binary` or `four`, got `{other}`"
                        )))
                    }
                }
            }
            "counts" => {
                self.counts = value
                    .split(',')
                    .map(|v| parse::<usize>(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr_max" => self.lr_max = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse(key, value)?,
            "val_per_class" => self.val_per_class = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "rotation_deg" => self.rotation_deg = parse(key, value)?,
            "scale_min" => self.scale_min = parse(key, value)?,
            "scale_max" => self.scale_max = parse(key, value)?,
            "mirror_prob" => self.mirror_prob = parse(key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, value)?,
            "finetune_lr" => self.finetune_lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "finetune_augment" => self.finetune_augment = parse(key, value)?,
            "finetune_eval_each_epoch" => self.finetune_eval_each_epoch = parse(key, value)?,
            "finetune_retain_best" => self.finetune_retain_best = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "grad_tolerance" => self.grad_tolerance = parse(key, value)?,
            other => return Err(CliError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// The effective configuration as a config file, in fixed key order.
    pub fn echo(&self) -> String {
        let counts: Vec<String> = self.counts.iter().map(|c| c.to_string()).collect();
        let task = match self.task {
            TaskKind::Binary => "binary",
            TaskKind::FourClass => "four",
        };
        format!(
            "arch = {}\n\
             image_size = {}\n\
             width_base = {}\n\
             seed = {}\n\
             task = {}\n\
             counts = {}\n\
             epochs = {}\n\
             batch_size = {}\n\
             lr_max = {}\n\
             lr_min = {}\n\
             adam_beta1 = {}\n\
             adam_beta2 = {}\n\
             adam_epsilon = {}\n\
             val_per_class = {}\n\
             augment = {}\n\
             rotation_deg = {}\n\
             scale_min = {}\n\
             scale_max = {}\n\
             mirror_prob = {}\n\
             finetune_epochs = {}\n\
             finetune_lr = {}\n\
             momentum = {}\n\
             finetune_augment = {}\n\
             finetune_eval_each_epoch = {}\n\
             finetune_retain_best = {}\n\
             folds = {}\n\
             grad_tolerance = {}\n",
            self.arch,
            self.image_size,
            self.width_base,
            self.seed,
            task,
            counts.join(","),
            self.epochs,
            self.batch_size,
            self.lr_max,
            self.lr_min,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_epsilon,
            self.val_per_class,
            self.augment,
            self.rotation_deg,
            self.scale_min,
            self.scale_max,
            self.mirror_prob,
            self.finetune_epochs,
            self.finetune_lr,
            self.momentum,
            self.finetune_augment,
            self.finetune_eval_each_epoch,
            self.finetune_retain_best,
            self.folds,
            self.grad_tolerance,
        )
    }

    pub fn augmentation_policy(&self) -> Option<AugmentationPolicy> {
        self.augment.then(|| AugmentationPolicy {
            rotation_deg: self.rotation_deg,
            scale_lo: self.scale_min,
            scale_hi: self.scale_max,
            mirror_prob: self.mirror_prob,
            seed: derive_seed(self.seed, &[stream::AUGMENT]),
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            val_per_class: self.val_per_class,
            augment: self.augmentation_policy(),
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            lr: self.finetune_lr,
            momentum: self.momentum,
            augment: self.finetune_augment.then(|| AugmentationPolicy {
                rotation_deg: self.rotation_deg,
                scale_lo: self.scale_min,
                scale_hi: self.scale_max,
                mirror_prob: self.mirror_prob,
                seed: derive_seed(self.seed, &[stream::AUGMENT]),
            }),
            eval_each_epoch: self.finetune_eval_each_epoch,
            retain_best: self.finetune_retain_best,
            seed: self.seed,
        }
    }
}
