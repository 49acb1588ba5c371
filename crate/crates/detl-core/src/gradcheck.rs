//! Finite-difference verification of the backward pass.
//!
//! For every trainable parameter of a small model, compares the tape's
//! analytic gradient of the cross-entropy loss against a central-difference
//! estimate evaluated with the 64-bit reference forward pass.

use crate::error::{Error, Result};
use crate::model::{ModelGraph, ParamKey};
use crate::reference::{loss_f64, RefParams};
use crate::tensor::Tensor;

/// Largest graph grad_check will process.
pub const MAX_PARAMS: usize = 10_000;

/// Worst relative error observed for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Per-parameter report, sorted worst-first.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// Largest relative error across all parameters (0 for an empty report).
    pub fn worst(&self) -> f64 {
        self.entries.first().map(|e| e.max_rel_err).unwrap_or(0.0)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst() < tolerance
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.entries.is_empty() {
            return writeln!(f, "no trainable parameters to check");
        }
        writeln!(
            f,
            "{:<22} {:>12}  {:>14}  {:>14}",
            "parameter", "max rel err", "analytic", "numeric"
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<22} {:>12.3e}  {:>14.6e}  {:>14.6e}",
                e.param, e.max_rel_err, e.analytic, e.numeric
            )?;
        }
        Ok(())
    }
}

/// rel(a, n) with a floor: gradients below the f32 noise floor are compared
/// absolutely (|a - n| < tol * 1e-4), not by ratio.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

/// Check analytic gradients of the mean cross-entropy loss on `batch` /
/// `labels` against 64-bit central differences, for every trainable
/// parameter. Entries come back sorted worst-first.
pub fn grad_check(model: &ModelGraph, batch: &Tensor, labels: &[usize]) -> Result<GradCheckReport> {
    grad_check_impl(model, batch, labels, 1.0)
}

/// Like [`grad_check`] but with a deliberately corrupted convolution
/// backward rule; a healthy checker must report large errors here.
pub fn grad_check_with_conv_fault(
    model: &ModelGraph,
    batch: &Tensor,
    labels: &[usize],
    fault_scale: f32,
) -> Result<GradCheckReport> {
    grad_check_impl(model, batch, labels, fault_scale)
}

fn grad_check_impl(
    model: &ModelGraph,
    batch: &Tensor,
    labels: &[usize],
    conv_fault: f32,
) -> Result<GradCheckReport> {
    if model.param_count() > MAX_PARAMS {
        return Err(Error::Config(format!(
            "grad_check is limited to {MAX_PARAMS} parameters, model has {}",
            model.param_count()
        )));
    }
    let (bsz, _, _, _) = batch.dims4()?;

    // Analytic side: one taped forward/backward in f32.
    let mut work = model.clone();
    let mut run = work.run_forward(batch)?;
    if conv_fault != 1.0 {
        run.tape.inject_conv_kernel_grad_fault(conv_fault);
    }
    let (loss, _probs) = run.tape.softmax_cross_entropy(run.logits, labels)?;
    run.tape.backward(loss)?;
    run.harvest_grads(&mut work);

    // Numeric side: central differences on the f64 reference forward.
    let batch64: Vec<f64> = batch.data().iter().map(|&v| f64::from(v)).collect();
    let mut ref_params = RefParams::from_model(model);

    let mut checks: Vec<(ParamKey, Vec<f64>)> = Vec::new();
    work.visit_params(|key, tensor, trainable| {
        if trainable {
            let analytic: Vec<f64> = tensor
                .grad()
                .map(|g| g.iter().map(|&v| f64::from(v)).collect())
                .unwrap_or_else(|| vec![0.0; tensor.numel()]);
            checks.push((key, analytic));
        }
    });

    let mut entries = Vec::with_capacity(checks.len());
    for (key, analytic) in checks {
        let mut worst = GradCheckEntry {
            param: key.to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let base = *ref_params.value_mut(key.layer, key.slot, i);
            let h = 1e-5 * base.abs().max(1.0);
            *ref_params.value_mut(key.layer, key.slot, i) = base + h;
            let plus = loss_f64(model, &ref_params, &batch64, bsz, labels)?;
            *ref_params.value_mut(key.layer, key.slot, i) = base - h;
            let minus = loss_f64(model, &ref_params, &batch64, bsz, labels)?;
            *ref_params.value_mut(key.layer, key.slot, i) = base;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(a, numeric);
            if err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        entries.push(worst);
    }
    entries.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
    Ok(GradCheckReport { entries })
}
