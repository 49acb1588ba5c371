//! Shared oracle code for the integration tests: naive double-precision
//! evaluators written independently of the library's kernels and tape.

#![allow(dead_code)]

use detl_core::model::{LayerKind, ModelGraph};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Naive cross-correlation: one big loop nest, f64 accumulation.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_oracle(
    input: &[f64],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernels: &[f64],
    cout: usize,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * padding - 3) / stride + 1;
    let ow = (w + 2 * padding - 3) / stride + 1;
    let mut out = vec![0.0f64; bsz * cout * oh * ow];
    for b in 0..bsz {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let y = (oy * stride + ky) as isize - padding as isize;
                                let x = (ox * stride + kx) as isize - padding as isize;
                                if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                                    acc += input[((b * cin + ci) * h + y as usize) * w + x as usize]
                                        * kernels[(co * cin + ci) * 9 + ky * 3 + kx];
                                }
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn maxpool_oracle(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![f64::NEG_INFINITY; planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(input[(p * h + 2 * oy + dy) * w + 2 * ox + dx]);
                    }
                }
                out[(p * oh + oy) * ow + ox] = best;
            }
        }
    }
    out
}

pub fn gap_oracle(input: &[f64], planes: usize, plane_len: usize) -> Vec<f64> {
    (0..planes)
        .map(|p| input[p * plane_len..(p + 1) * plane_len].iter().sum::<f64>() / plane_len as f64)
        .collect()
}

pub fn dense_oracle(
    input: &[f64],
    bsz: usize,
    n: usize,
    weight: &[f64],
    m: usize,
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0f64; bsz * m];
    for b in 0..bsz {
        for j in 0..m {
            let mut acc = bias[j];
            for i in 0..n {
                acc += input[b * n + i] * weight[j * n + i];
            }
            out[b * m + j] = acc;
        }
    }
    out
}

pub fn cross_entropy_oracle(logits: &[f64], bsz: usize, classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for b in 0..bsz {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        total += sum.ln() - (row[labels[b]] - max);
    }
    total / bsz as f64
}

/// Double-precision parameter images of a model, indexable for perturbation.
pub struct OracleParams {
    pub per_layer: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl OracleParams {
    pub fn of(model: &ModelGraph) -> Self {
        let mut per_layer: Vec<Option<(Vec<f64>, Vec<f64>)>> =
            vec![None; model.layers().len()];
        model.visit_params(|key, t, _| {
            let entry = per_layer[key.layer].get_or_insert_with(|| (Vec::new(), Vec::new()));
            let buf = to_f64(t.data());
            if key.slot == 0 {
                entry.0 = buf;
            } else {
                entry.1 = buf;
            }
        });
        OracleParams { per_layer }
    }
}

/// Run any model forward in f64, returning every activation (entry 0 is the
/// input batch). Activation shapes come from the model's public layer list.
pub fn model_forward_oracle(
    model: &ModelGraph,
    params: &OracleParams,
    batch: &[f64],
    bsz: usize,
    input_hw: (usize, usize),
) -> Vec<Vec<f64>> {
    let mut acts = vec![batch.to_vec()];
    let mut shapes: Vec<Vec<usize>> = vec![vec![
        model_in_channels(model),
        input_hw.0,
        input_hw.1,
    ]];
    for (i, layer) in model.layers().iter().enumerate() {
        let (next, shape) = eval_layer_oracle(params, &acts, &shapes, i, bsz, &layer.kind);
        acts.push(next);
        shapes.push(shape);
    }
    acts
}

/// Recompute from layer `start` onward with `acts[start]` replaced.
pub fn model_tail_oracle(
    model: &ModelGraph,
    params: &OracleParams,
    cached: &[Vec<f64>],
    start: usize,
    replaced: &[f64],
    bsz: usize,
    input_hw: (usize, usize),
) -> Vec<f64> {
    let mut acts: Vec<Vec<f64>> = cached[..=start].to_vec();
    acts[start] = replaced.to_vec();
    let mut shapes: Vec<Vec<usize>> = vec![vec![
        model_in_channels(model),
        input_hw.0,
        input_hw.1,
    ]];
    for layer in model.layers().iter().take(start) {
        let shape = shape_after(shapes.last().unwrap(), &layer.kind);
        shapes.push(shape);
    }
    for (i, layer) in model.layers().iter().enumerate().skip(start) {
        let (next, shape) = eval_layer_oracle(params, &acts, &shapes, i, bsz, &layer.kind);
        acts.push(next);
        shapes.push(shape);
    }
    acts.pop().unwrap()
}

fn model_in_channels(model: &ModelGraph) -> usize {
    model.input_shape().0
}

fn shape_after(prev: &[usize], kind: &LayerKind) -> Vec<usize> {
    match kind {
        LayerKind::Conv3x3 {
            out_channels,
            stride,
            padding,
            ..
        } => {
            let oh = (prev[1] + 2 * padding - 3) / stride + 1;
            let ow = (prev[2] + 2 * padding - 3) / stride + 1;
            vec![*out_channels, oh, ow]
        }
        LayerKind::MaxPool => vec![prev[0], prev[1] / 2, prev[2] / 2],
        LayerKind::Relu | LayerKind::ResidualAdd { .. } => prev.to_vec(),
        LayerKind::GlobalAvgPool => vec![prev[0]],
        LayerKind::Flatten => vec![prev.iter().product()],
        LayerKind::Dense { out_dim, .. } => vec![*out_dim],
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_layer_oracle(
    params: &OracleParams,
    acts: &[Vec<f64>],
    shapes: &[Vec<usize>],
    layer: usize,
    bsz: usize,
    kind: &LayerKind,
) -> (Vec<f64>, Vec<usize>) {
    let input = &acts[layer];
    let prev = &shapes[layer];
    let out_shape = shape_after(prev, kind);
    let out = match kind {
        LayerKind::Conv3x3 {
            in_channels,
            out_channels,
            stride,
            padding,
        } => {
            let (kernels, bias) = params.per_layer[layer].as_ref().unwrap();
            let (out, _, _) = conv2d_oracle(
                input,
                bsz,
                *in_channels,
                prev[1],
                prev[2],
                kernels,
                *out_channels,
                bias,
                *stride,
                *padding,
            );
            out
        }
        LayerKind::MaxPool => maxpool_oracle(input, bsz * prev[0], prev[1], prev[2]),
        LayerKind::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
        LayerKind::GlobalAvgPool => gap_oracle(input, bsz * prev[0], prev[1] * prev[2]),
        LayerKind::Flatten => input.clone(),
        LayerKind::Dense { in_dim, out_dim } => {
            let (weight, bias) = params.per_layer[layer].as_ref().unwrap();
            dense_oracle(input, bsz, *in_dim, weight, *out_dim, bias)
        }
        LayerKind::ResidualAdd { from } => acts[from + 1]
            .iter()
            .zip(input)
            .map(|(a, b)| a + b)
            .collect(),
    };
    (out, out_shape)
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Relative error with a floor: values below the f32 noise floor compare
/// absolutely rather than by ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}
