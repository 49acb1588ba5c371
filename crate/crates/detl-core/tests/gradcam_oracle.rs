//! Grad-CAM maps against a finite-difference oracle: every feature-map
//! gradient is estimated by central differences on a 64-bit tail
//! re-evaluation, then fed through the same weighted-sum-plus-ReLU recipe.

mod common;

use common::*;
use detl_core::gradcam::{combine_feature_maps, gradcam, render_heatmap, write_heatmap_ppm, Heatmap};
use detl_core::model::{glorot_conv, glorot_dense, LayerKind, LayerParams, LayerSpec, ModelGraph};
use detl_core::rng::rng_from;
use detl_core::tensor::Tensor;
use rand::Rng;

/// conv(1->k1) / relu / pool / conv(k1->k2) / relu / gap / dense(k2->4)
/// over 8x8 inputs: the final feature maps are k2 channels of 4x4.
fn toy_two_conv(seed: u64, k1: usize, k2: usize) -> ModelGraph {
    let mut r = rng_from(seed, &[17]);
    let mut layers = Vec::new();
    let mut params: Vec<Option<LayerParams>> = Vec::new();
    layers.push(LayerSpec::new(
        LayerKind::Conv3x3 {
            in_channels: 1,
            out_channels: k1,
            stride: 1,
            padding: 1,
        },
        0,
    ));
    params.push(Some(glorot_conv(1, k1, &mut r)));
    layers.push(LayerSpec::new(LayerKind::Relu, 0));
    params.push(None);
    layers.push(LayerSpec::new(LayerKind::MaxPool, 0));
    params.push(None);
    layers.push(LayerSpec::new(
        LayerKind::Conv3x3 {
            in_channels: k1,
            out_channels: k2,
            stride: 1,
            padding: 1,
        },
        1,
    ));
    params.push(Some(glorot_conv(k1, k2, &mut r)));
    layers.push(LayerSpec::new(LayerKind::Relu, 1));
    params.push(None);
    layers.push(LayerSpec::new(LayerKind::GlobalAvgPool, 2));
    params.push(None);
    layers.push(LayerSpec::new(
        LayerKind::Dense {
            in_dim: k2,
            out_dim: 4,
        },
        2,
    ));
    params.push(Some(glorot_dense(k2, 4, &mut r)));
    ModelGraph::new(layers, params, (1, 8, 8), 4).unwrap()
}

/// Finite-difference Grad-CAM: estimate every feature-map gradient
/// numerically, average into channel weights, weighted-sum, ReLU.
fn oracle_map(model: &ModelGraph, image: &[f32], class: usize) -> Vec<f64> {
    let params = OracleParams::of(model);
    let batch = to_f64(image);
    let acts = model_forward_oracle(model, &params, &batch, 1, (8, 8));

    let conv_layer = model
        .layers()
        .iter()
        .rposition(|l| matches!(l.kind, LayerKind::Conv3x3 { .. }))
        .expect("toy model has convolutions");
    let maps = acts[conv_layer + 1].clone();
    let k = match model.layers()[conv_layer].kind {
        LayerKind::Conv3x3 { out_channels, .. } => out_channels,
        _ => unreachable!(),
    };
    let plane = maps.len() / k;
    let classes = model.class_count();

    let h = 1e-4f64;
    let mut grads = vec![0.0f64; maps.len()];
    for i in 0..maps.len() {
        let mut perturbed = maps.clone();
        perturbed[i] = maps[i] + h;
        let plus = model_tail_oracle(model, &params, &acts, conv_layer + 1, &perturbed, 1, (8, 8));
        perturbed[i] = maps[i] - h;
        let minus = model_tail_oracle(model, &params, &acts, conv_layer + 1, &perturbed, 1, (8, 8));
        grads[i] = (plus[class] - minus[class]) / (2.0 * h);
        let _ = classes;
    }

    let mut weights = vec![0.0f64; k];
    for c in 0..k {
        weights[c] = grads[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
    let mut map = vec![0.0f64; plane];
    for c in 0..k {
        for (m, &a) in map.iter_mut().zip(&maps[c * plane..(c + 1) * plane]) {
            *m += weights[c] * a;
        }
    }
    map.into_iter().map(|v| v.max(0.0)).collect()
}

#[test]
fn analytic_map_matches_finite_difference_oracle() {
    for (seed, k1, k2) in [(1u64, 2usize, 3usize), (2, 3, 2), (3, 2, 2), (4, 4, 3), (5, 3, 4)] {
        let model = toy_two_conv(seed, k1, k2);
        let mut r = rng(9000 + seed);
        let image_data = random_vec(&mut r, 64, 0.0, 1.0);
        let image = Tensor::from_vec(&[1, 8, 8], image_data.clone()).unwrap();
        for class in 0..4 {
            let heatmap = gradcam(&model, &image, class).unwrap();
            let expected = oracle_map(&model, &image_data, class);
            let got = to_f64(heatmap.raw.data());
            let diff = max_abs_diff(&got, &expected);
            assert!(
                diff < 1e-4,
                "seed {seed} class {class}: max abs diff {diff:.3e}"
            );
            assert!(
                heatmap.raw.data().iter().all(|&v| v >= 0.0),
                "raw map must be non-negative"
            );
        }
    }
}

#[test]
fn zero_feature_maps_give_zero_heatmap() {
    let mut model = toy_two_conv(9, 2, 3);
    // Silence the last conv layer entirely.
    let conv_layer = model
        .layers()
        .iter()
        .rposition(|l| matches!(l.kind, LayerKind::Conv3x3 { .. }))
        .unwrap();
    for slot in [0u8, 1] {
        let key = detl_core::ParamKey {
            layer: conv_layer,
            slot,
        };
        let n = model.param_tensor(key).unwrap().numel();
        model.set_param_data(key, vec![0.0; n]).unwrap();
    }
    let image = Tensor::from_vec(&[1, 8, 8], vec![0.5; 64]).unwrap();
    let hm = gradcam(&model, &image, 1).unwrap();
    assert!(hm.raw.data().iter().all(|&v| v == 0.0));
    assert!(hm.upsampled.data().iter().all(|&v| v == 0.0));
}

#[test]
fn constant_positive_map_normalizes_to_all_ones() {
    let mut model = toy_two_conv(10, 2, 1);
    let conv_layer = model
        .layers()
        .iter()
        .rposition(|l| matches!(l.kind, LayerKind::Conv3x3 { .. }))
        .unwrap();
    // Zero kernels + positive bias: the single feature map is constant
    // positive. A positive head weight makes the channel weight positive.
    let kernels = detl_core::ParamKey {
        layer: conv_layer,
        slot: 0,
    };
    let n = model.param_tensor(kernels).unwrap().numel();
    model.set_param_data(kernels, vec![0.0; n]).unwrap();
    model
        .set_param_data(
            detl_core::ParamKey {
                layer: conv_layer,
                slot: 1,
            },
            vec![0.7],
        )
        .unwrap();
    let head = model.layers().len() - 1;
    model
        .set_param_data(detl_core::ParamKey { layer: head, slot: 0 }, vec![0.9; 4])
        .unwrap();
    let image = Tensor::from_vec(&[1, 8, 8], vec![0.3; 64]).unwrap();
    let hm = gradcam(&model, &image, 2).unwrap();
    assert!(hm.raw.data().iter().all(|&v| v > 0.0));
    assert!(hm.upsampled.data().iter().all(|&v| v == 1.0));
}

#[test]
fn doubling_injected_weights_doubles_the_preactivation_map() {
    let model = toy_two_conv(11, 2, 3);
    let image = Tensor::from_vec(
        &[1, 8, 8],
        random_vec(&mut rng(77), 64, 0.0, 1.0),
    )
    .unwrap();
    let run = model.run_forward(
        &Tensor::from_vec(&[1, 1, 8, 8], image.data().to_vec()).unwrap(),
    )
    .unwrap();
    let maps = run.tape.value(run.last_conv.unwrap()).to_vec();
    let weights = [0.4f32, -0.3, 0.2];
    let single = combine_feature_maps(&maps, 3, 4, 4, &weights);
    let doubled_w: Vec<f32> = weights.iter().map(|w| 2.0 * w).collect();
    let doubled = combine_feature_maps(&maps, 3, 4, 4, &doubled_w);
    for (s, d) in single.iter().zip(&doubled) {
        assert!((2.0 * s - d).abs() < 1e-5);
    }
}

#[test]
fn upsampled_argmax_stays_within_one_feature_cell() {
    for seed in 0..6u64 {
        let model = toy_two_conv(20 + seed, 3, 3);
        let image = Tensor::from_vec(
            &[1, 8, 8],
            random_vec(&mut rng(40 + seed), 64, 0.0, 1.0),
        )
        .unwrap();
        let hm = gradcam(&model, &image, (seed % 4) as usize).unwrap();
        let raw = hm.raw.data();
        if raw.iter().all(|&v| v == 0.0) {
            continue;
        }
        let arg_raw = argmax(raw);
        let (ry, rx) = (arg_raw / 4, arg_raw % 4);
        let up = hm.upsampled.data();
        let arg_up = argmax(up);
        let (uy, ux) = (arg_up / 8, arg_up % 8);
        // Rescale the upsampled argmax into feature-map cells (8 -> 4).
        let cy = uy as f64 * 3.0 / 7.0;
        let cx = ux as f64 * 3.0 / 7.0;
        assert!(
            (cy - ry as f64).abs() <= 1.0 && (cx - rx as f64).abs() <= 1.0,
            "seed {seed}: raw argmax ({ry},{rx}), upsampled maps to ({cy:.2},{cx:.2})"
        );
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[test]
fn render_zero_map_is_pure_blue_tint() {
    let hm = Heatmap {
        raw: Tensor::zeros(&[2, 2]),
        upsampled: Tensor::zeros(&[4, 4]),
        class_index: 0,
        class_score: 0.0,
    };
    let base = Tensor::from_vec(&[4, 4], vec![0.4; 16]).unwrap();
    let rgb = render_heatmap(&hm, &base).unwrap();
    for px in rgb.chunks(3) {
        assert_eq!(px[2], 255, "blue channel saturated");
        assert!(px[0] < 255 && px[0] == px[1], "red/green carry only the dimmed base");
    }
}

#[test]
fn render_peak_pixel_has_full_red() {
    let mut up = vec![0.0f32; 16];
    up[5] = 1.0;
    let hm = Heatmap {
        raw: Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap(),
        upsampled: Tensor::from_vec(&[4, 4], up).unwrap(),
        class_index: 1,
        class_score: 1.0,
    };
    let base = Tensor::from_vec(&[4, 4], vec![0.2; 16]).unwrap();
    let rgb = render_heatmap(&hm, &base).unwrap();
    assert_eq!(rgb[5 * 3], 255, "peak pixel renders with red = 255");
}

#[test]
fn written_ppm_roundtrips_identically() {
    let model = toy_two_conv(31, 2, 3);
    let mut r = rng(123);
    let image = Tensor::from_vec(&[1, 8, 8], random_vec(&mut r, 64, 0.0, 1.0)).unwrap();
    let hm = gradcam(&model, &image, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.ppm");
    write_heatmap_ppm(&hm, &image, &path).unwrap();
    let original = std::fs::read(&path).unwrap();
    let (w, h, rgb) = detl_core::pnm::read_ppm(&path).unwrap();
    detl_core::pnm::write_ppm(&path, w, h, &rgb).unwrap();
    assert_eq!(original, std::fs::read(&path).unwrap());
}

#[test]
fn gradcam_rejects_bad_class_and_convless_models() {
    let model = toy_two_conv(32, 2, 2);
    let image = Tensor::from_vec(&[1, 8, 8], vec![0.1; 64]).unwrap();
    assert!(gradcam(&model, &image, 7).is_err());

    let mut r = rng_from(3, &[1]);
    let dense_only = ModelGraph::new(
        vec![
            LayerSpec::new(LayerKind::Flatten, 0),
            LayerSpec::new(
                LayerKind::Dense {
                    in_dim: 64,
                    out_dim: 2,
                },
                1,
            ),
        ],
        vec![None, Some(glorot_dense(64, 2, &mut r))],
        (1, 8, 8),
        2,
    )
    .unwrap();
    assert!(gradcam(&dense_only, &image, 0).is_err());
}
