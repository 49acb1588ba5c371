//! Parameter update rules and the learning-rate schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{ModelGraph, ParamKey};

/// Half-cosine decay from `lr_max` at epoch 0 to `lr_min` at epoch `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_epochs: usize) -> Result<Self> {
        if !(lr_max > 0.0) || lr_min < 0.0 || lr_min > lr_max {
            return Err(Error::Config(format!(
                "cosine schedule needs 0 <= lr_min <= lr_max with lr_max > 0, got {lr_min}, {lr_max}"
            )));
        }
        if total_epochs == 0 {
            return Err(Error::Config("cosine schedule needs at least one epoch".into()));
        }
        Ok(CosineSchedule {
            lr_max,
            lr_min,
            total_epochs,
        })
    }

    /// lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi * t / T)) / 2.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::Config(format!(
                "epoch {epoch} outside schedule range 0..={}",
                self.total_epochs
            )));
        }
        let t = epoch as f64 / self.total_epochs as f64;
        Ok(self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[derive(Debug, Clone)]
enum Algorithm {
    SgdMomentum { momentum: f32 },
    Adam {
        beta1: f32,
        beta2: f32,
        epsilon: f32,
        /// Running beta powers for bias correction, updated once per step.
        beta1_t: f32,
        beta2_t: f32,
    },
}

#[derive(Debug, Clone)]
enum Slot {
    Velocity(Vec<f32>),
    Moments { m: Vec<f32>, v: Vec<f32> },
}

/// Optimizer state: the update rule, the current learning rate (optionally
/// driven by a schedule), and per-parameter buffers. Buffers are created
/// lazily for trainable parameters only; frozen parameters are never
/// touched.
#[derive(Debug, Clone)]
pub struct Optimizer {
    algorithm: Algorithm,
    lr: f32,
    schedule: Option<CosineSchedule>,
    slots: HashMap<ParamKey, Slot>,
    step_count: u64,
}

impl Optimizer {
    pub fn sgd_momentum(lr: f32, momentum: f32) -> Result<Self> {
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Optimizer {
            algorithm: Algorithm::SgdMomentum { momentum },
            lr,
            schedule: None,
            slots: HashMap::new(),
            step_count: 0,
        })
    }

    pub fn adam(lr: f32, beta1: f32, beta2: f32, epsilon: f32) -> Result<Self> {
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Optimizer {
            algorithm: Algorithm::Adam {
                beta1,
                beta2,
                epsilon,
                beta1_t: 1.0,
                beta2_t: 1.0,
            },
            lr,
            schedule: None,
            slots: HashMap::new(),
            step_count: 0,
        })
    }

    pub fn with_schedule(mut self, schedule: CosineSchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    /// Set the learning rate from the schedule for the given epoch.
    pub fn begin_epoch(&mut self, epoch: usize) -> Result<()> {
        if let Some(s) = self.schedule {
            self.lr = s.lr_at(epoch)? as f32;
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f32 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to every trainable parameter. Gradients must have
    /// been populated by a backward pass.
    pub fn step(&mut self, model: &mut ModelGraph) -> Result<()> {
        self.step_count += 1;
        if let Algorithm::Adam {
            beta1,
            beta2,
            beta1_t,
            beta2_t,
            ..
        } = &mut self.algorithm
        {
            *beta1_t *= *beta1;
            *beta2_t *= *beta2;
        }

        let lr = self.lr;
        let algorithm = &self.algorithm;
        let slots = &mut self.slots;
        let mut missing: Option<ParamKey> = None;

        model.visit_params_mut(|key, tensor, trainable| {
            if !trainable || missing.is_some() {
                return;
            }
            let Some(grad) = tensor.grad() else {
                missing = Some(key);
                return;
            };
            let grad = grad.to_vec();
            match algorithm {
                Algorithm::SgdMomentum { momentum } => {
                    let slot = slots
                        .entry(key)
                        .or_insert_with(|| Slot::Velocity(vec![0.0; grad.len()]));
                    let Slot::Velocity(vel) = slot else {
                        unreachable!("slot kind fixed per optimizer")
                    };
                    for ((p, v), g) in tensor.data_mut().iter_mut().zip(vel).zip(&grad) {
                        *v = *momentum * *v + *g;
                        *p -= lr * *v;
                    }
                }
                Algorithm::Adam {
                    beta1,
                    beta2,
                    epsilon,
                    beta1_t,
                    beta2_t,
                } => {
                    let slot = slots.entry(key).or_insert_with(|| Slot::Moments {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                    });
                    let Slot::Moments { m, v } = slot else {
                        unreachable!("slot kind fixed per optimizer")
                    };
                    let bc1 = 1.0 - *beta1_t;
                    let bc2 = 1.0 - *beta2_t;
                    for (((p, m), v), g) in
                        tensor.data_mut().iter_mut().zip(m).zip(v).zip(&grad)
                    {
                        *m = *beta1 * *m + (1.0 - *beta1) * *g;
                        *v = *beta2 * *v + (1.0 - *beta2) * *g * *g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + *epsilon);
                    }
                }
            }
        });

        if let Some(key) = missing {
            return Err(Error::MissingGradient(key.to_string()));
        }
        Ok(())
    }
}
