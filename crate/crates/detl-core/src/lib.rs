//! Desk-scale CNN training stack.
//!
//! The crate provides everything needed to pretrain a small CNN on a binary
//! screening task, transfer it to a four-class target task by swapping the
//! classifier head and freezing all but the last convolutional block, and
//! evaluate the result with stratified cross-validation and Grad-CAM
//! decision heatmaps:
//!
//! * [`tensor`] / [`tape`] — dense tensors and reverse-mode autodiff over
//!   the convolution, pooling, dense, relu, and cross-entropy primitives.
//! * [`model`] — block-structured models and the three architecture presets.
//! * [`optim`] — SGD with momentum, Adam, and cosine annealing.
//! * [`data`] — synthetic dataset generation, PGM ingestion, real-time
//!   augmentation, and stratified splits.
//! * [`transfer`] — pretraining, head replacement with selective freezing,
//!   and fine-tuning.
//! * [`eval`] — confusion matrices and the k-fold cross-validation driver.
//! * [`gradcam`] — gradient class activation maps and heatmap rendering.
//! * [`gradcheck`] — finite-difference verification of the backward pass.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcam;
pub mod gradcheck;
pub mod model;
mod ops;
pub mod pnm;
mod reference;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod transfer;

pub mod optim;

pub use error::{Error, Result};
pub use model::{
    build_preset, LayerKind, LayerParams, LayerSpec, ModelGraph, ParamKey, PresetMeta, PresetName,
};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
