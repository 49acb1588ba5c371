//! Gradient class activation maps.
//!
//! For a class score `y_c` (the pre-softmax logit) and the feature maps
//! `A_i` of the last convolution layer, each channel weight is the spatial
//! mean of `dy_c / dA_i`; the raw map is the ReLU of the weighted sum of
//! the feature maps. For display the raw map is bilinearly upsampled to the
//! input resolution and min-max normalized.

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// A class activation map for one image and class.
#[derive(Debug, Clone)]
pub struct Heatmap {
    /// Post-ReLU map at feature-map resolution, un-normalized.
    pub raw: Tensor,
    /// Bilinearly upsampled to input resolution and min-max normalized to
    /// `[0, 1]` (an all-zero raw map stays all-zero).
    pub upsampled: Tensor,
    pub class_index: usize,
    /// The pre-softmax logit the map explains.
    pub class_score: f32,
}

/// Compute the activation map of `class_index` for a single grayscale
/// image (`[1, H, W]` or `[1, 1, H, W]`).
pub fn gradcam(model: &ModelGraph, image: &Tensor, class_index: usize) -> Result<Heatmap> {
    if class_index >= model.class_count() {
        return Err(Error::LabelOutOfRange {
            label: class_index,
            classes: model.class_count(),
        });
    }
    let batch = as_batch(image)?;
    let mut run = model.run_forward(&batch)?;
    let feature_node = run
        .last_conv
        .ok_or_else(|| Error::Config("model has no convolutional layers".into()))?;

    let score_node = run.tape.select_logit(run.logits, 0, class_index)?;
    let class_score = run.tape.value(score_node)[0];
    run.tape.backward(score_node)?;

    let fshape = run.tape.shape(feature_node).to_vec();
    let (k, fh, fw) = (fshape[1], fshape[2], fshape[3]);
    let maps = run.tape.value(feature_node);
    let zero_grads;
    let grads = match run.tape.grad(feature_node) {
        Some(g) => g,
        None => {
            // Gradient never reached the feature maps (e.g. a fully dead
            // ReLU path); the map is all zeros.
            zero_grads = vec![0.0f32; maps.len()];
            &zero_grads
        }
    };

    // Channel weights: spatial mean of the class-score gradient.
    let plane = fh * fw;
    let mut weights = Vec::with_capacity(k);
    for i in 0..k {
        let sum: f64 = grads[i * plane..(i + 1) * plane]
            .iter()
            .map(|&v| f64::from(v))
            .sum();
        weights.push((sum / plane as f64) as f32);
    }

    let pre_relu = combine_feature_maps(maps, k, fh, fw, &weights);
    let raw: Vec<f32> = pre_relu.iter().map(|&v| v.max(0.0)).collect();

    let (_, h, w) = input_hw(image)?;
    let upsampled = normalize(&upsample_bilinear(&raw, fh, fw, h, w));

    Ok(Heatmap {
        raw: Tensor::from_vec(&[fh, fw], raw)?,
        upsampled: Tensor::from_vec(&[h, w], upsampled)?,
        class_index,
        class_score,
    })
}

/// Weighted sum of `k` feature maps of extent `h` x `w` (the pre-ReLU map).
/// Exposed so tests can inject channel weights directly.
#[doc(hidden)]
pub fn combine_feature_maps(maps: &[f32], k: usize, h: usize, w: usize, weights: &[f32]) -> Vec<f32> {
    let plane = h * w;
    let mut out = vec![0.0f64; plane];
    for i in 0..k {
        let wgt = f64::from(weights[i]);
        for (o, &m) in out.iter_mut().zip(&maps[i * plane..(i + 1) * plane]) {
            *o += wgt * f64::from(m);
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Render the heatmap over its grayscale base image as interleaved RGB:
/// a blue-to-red colormap at full strength plus the base dimmed to half,
/// saturating per channel.
pub fn render_heatmap(heatmap: &Heatmap, base: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *heatmap.upsampled.shape() {
        [h, w] => (h, w),
        _ => unreachable!("upsampled map is 2-d"),
    };
    let base_data = flat_image(base)?;
    if base_data.len() != h * w {
        return Err(Error::shape(
            "render_heatmap",
            format!("base image with {}x{} pixels", h, w),
            format!("{} pixels", base_data.len()),
        ));
    }
    let mut rgb = Vec::with_capacity(3 * h * w);
    for (v, g) in heatmap.upsampled.data().iter().zip(base_data) {
        let half_base = (g.clamp(0.0, 1.0) * 127.5).round() as u16;
        let red = (v * 255.0).round() as u16;
        let blue = ((1.0 - v) * 255.0).round() as u16;
        rgb.push((red + half_base).min(255) as u8);
        rgb.push(half_base.min(255) as u8);
        rgb.push((blue + half_base).min(255) as u8);
    }
    Ok(rgb)
}

/// Render and write as a binary PPM.
pub fn write_heatmap_ppm(
    heatmap: &Heatmap,
    base: &Tensor,
    path: &std::path::Path,
) -> Result<()> {
    let (h, w) = match *heatmap.upsampled.shape() {
        [h, w] => (h, w),
        _ => unreachable!("upsampled map is 2-d"),
    };
    let rgb = render_heatmap(heatmap, base)?;
    crate::pnm::write_ppm(path, w, h, &rgb)
}

fn as_batch(image: &Tensor) -> Result<Tensor> {
    match *image.shape() {
        [c, h, w] => Tensor::from_vec(&[1, c, h, w], image.data().to_vec()),
        [1, c, h, w] => Tensor::from_vec(&[1, c, h, w], image.data().to_vec()),
        ref s => Err(Error::shape(
            "gradcam image",
            "[C, H, W] or [1, C, H, W]",
            format!("{s:?}"),
        )),
    }
}

fn input_hw(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] | [_, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(
            "gradcam image",
            "[C, H, W] or [1, C, H, W]",
            format!("{s:?}"),
        )),
    }
}

fn flat_image(image: &Tensor) -> Result<&[f32]> {
    match *image.shape() {
        [_, _] | [1, _, _] | [1, 1, _, _] => Ok(image.data()),
        ref s => Err(Error::shape(
            "heatmap base image",
            "[H, W], [1, H, W] or [1, 1, H, W]",
            format!("{s:?}"),
        )),
    }
}

/// Bilinear upsampling with corner alignment.
fn upsample_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(dh * dw);
    let fy = if dh > 1 { (sh - 1) as f64 / (dh - 1) as f64 } else { 0.0 };
    let fx = if dw > 1 { (sw - 1) as f64 / (dw - 1) as f64 } else { 0.0 };
    for y in 0..dh {
        let sy = y as f64 * fy;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = sy - y0 as f64;
        for x in 0..dw {
            let sx = x as f64 * fx;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = sx - x0 as f64;
            let top = f64::from(src[y0 * sw + x0]) * (1.0 - wx) + f64::from(src[y0 * sw + x1]) * wx;
            let bottom =
                f64::from(src[y1 * sw + x0]) * (1.0 - wx) + f64::from(src[y1 * sw + x1]) * wx;
            out.push((top * (1.0 - wy) + bottom * wy) as f32);
        }
    }
    out
}

/// Min-max normalize to `[0, 1]`. A constant positive map becomes all ones;
/// an all-zero map stays all-zero.
fn normalize(map: &[f32]) -> Vec<f32> {
    let max = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let min = map.iter().copied().fold(f32::INFINITY, f32::min);
    if max > min {
        map.iter().map(|&v| (v - min) / (max - min)).collect()
    } else if max > 0.0 {
        vec![1.0; map.len()]
    } else {
        vec![0.0; map.len()]
    }
}
