//! Double-precision naive model evaluation.
//!
//! A direct loop-nest forward pass in `f64`, written without any of the
//! tape machinery. It exists so that finite-difference gradient estimates
//! can be computed at full 64-bit precision: perturbations of the order of
//! 1e-5 would drown in `f32` forward noise.

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerParams, ModelGraph};

/// All activations of one forward pass; entry 0 is the input batch.
pub(crate) struct RefActivations {
    pub acts: Vec<Vec<f64>>,
}

/// Model parameters converted to f64 once, so repeated perturbed
/// evaluations do not keep converting.
pub(crate) struct RefParams {
    per_layer: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl RefParams {
    pub(crate) fn from_model(model: &ModelGraph) -> Self {
        let per_layer = model
            .layer_params()
            .iter()
            .map(|p| {
                p.as_ref().map(|p| match p {
                    LayerParams::Conv { kernels, bias } => (
                        kernels.data().iter().map(|&v| f64::from(v)).collect(),
                        bias.data().iter().map(|&v| f64::from(v)).collect(),
                    ),
                    LayerParams::Dense { weight, bias } => (
                        weight.data().iter().map(|&v| f64::from(v)).collect(),
                        bias.data().iter().map(|&v| f64::from(v)).collect(),
                    ),
                })
            })
            .collect();
        RefParams { per_layer }
    }

    /// Mutable access to one parameter value (slot 0 = weights, 1 = bias).
    pub(crate) fn value_mut(&mut self, layer: usize, slot: u8, index: usize) -> &mut f64 {
        let entry = self.per_layer[layer].as_mut().expect("parameterized layer");
        let buf = if slot == 0 { &mut entry.0 } else { &mut entry.1 };
        &mut buf[index]
    }
}

/// Run the model forward in f64 over a batch, returning every activation.
pub(crate) fn forward_f64(
    model: &ModelGraph,
    params: &RefParams,
    batch: &[f64],
    bsz: usize,
) -> Result<RefActivations> {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(model.layers().len() + 1);
    acts.push(batch.to_vec());
    for start in 0..model.layers().len() {
        let next = eval_layer(model, params, &acts, start, bsz)?;
        acts.push(next);
    }
    Ok(RefActivations { acts })
}

/// Mean softmax cross-entropy over the batch, in f64.
pub(crate) fn cross_entropy_f64(logits: &[f64], bsz: usize, classes: usize, labels: &[usize]) -> f64 {
    let mut loss = 0.0;
    for b in 0..bsz {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        loss += sum.ln() - (row[labels[b]] - max);
    }
    loss / bsz as f64
}

/// Forward plus loss, for finite differencing over parameters.
pub(crate) fn loss_f64(
    model: &ModelGraph,
    params: &RefParams,
    batch: &[f64],
    bsz: usize,
    labels: &[usize],
) -> Result<f64> {
    let acts = forward_f64(model, params, batch, bsz)?;
    let logits = acts.acts.last().expect("logits");
    Ok(cross_entropy_f64(logits, bsz, model.class_count(), labels))
}

fn eval_layer(
    model: &ModelGraph,
    params: &RefParams,
    acts: &[Vec<f64>],
    layer: usize,
    bsz: usize,
) -> Result<Vec<f64>> {
    let spec = &model.layers()[layer];
    let input = &acts[layer];
    let in_shape = &model.act_shapes()[layer];
    let out_shape = &model.act_shapes()[layer + 1];
    let out = match &spec.kind {
        LayerKind::Conv3x3 {
            in_channels,
            out_channels,
            stride,
            padding,
        } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let (kernels, bias) = params.per_layer[layer].as_ref().expect("conv params");
            let mut out = vec![0.0f64; bsz * out_channels * oh * ow];
            for b in 0..bsz {
                for co in 0..*out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias[co];
                            for ci in 0..*in_channels {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let y = (oy * stride + ky) as isize - *padding as isize;
                                        let x = (ox * stride + kx) as isize - *padding as isize;
                                        if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                                            let iv = input[((b * in_channels + ci) * h
                                                + y as usize)
                                                * w
                                                + x as usize];
                                            let kv =
                                                kernels[(co * in_channels + ci) * 9 + ky * 3 + kx];
                                            acc += iv * kv;
                                        }
                                    }
                                }
                            }
                            out[((b * out_channels + co) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
            out
        }
        LayerKind::MaxPool => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0f64; bsz * c * oh * ow];
            for bc in 0..bsz * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v = input[(bc * h + 2 * oy + dy) * w + 2 * ox + dx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[(bc * oh + oy) * ow + ox] = best;
                    }
                }
            }
            out
        }
        LayerKind::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
        LayerKind::GlobalAvgPool => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let mut out = vec![0.0f64; bsz * c];
            for bc in 0..bsz * c {
                out[bc] = input[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>()
                    / (h * w) as f64;
            }
            out
        }
        LayerKind::Flatten => input.clone(),
        LayerKind::Dense { in_dim, out_dim } => {
            let (weight, bias) = params.per_layer[layer].as_ref().expect("dense params");
            let mut out = vec![0.0f64; bsz * out_dim];
            for b in 0..bsz {
                for j in 0..*out_dim {
                    let mut acc = bias[j];
                    for n in 0..*in_dim {
                        acc += input[b * in_dim + n] * weight[j * in_dim + n];
                    }
                    out[b * out_dim + j] = acc;
                }
            }
            out
        }
        LayerKind::ResidualAdd { from } => {
            let shortcut = &acts[from + 1];
            if shortcut.len() != input.len() {
                return Err(Error::shape(
                    "reference residual add",
                    format!("{} values", input.len()),
                    format!("{} values", shortcut.len()),
                ));
            }
            input.iter().zip(shortcut).map(|(a, b)| a + b).collect()
        }
    };
    Ok(out)
}
