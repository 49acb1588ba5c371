//! Deterministic synthetic chest-image generator.
//!
//! Four procedural signatures stand in for the clinical classes: a smooth
//! low-noise lung field (normal), a few dense patchy foci (pneumonia), many
//! diffuse low-contrast blobs biased to the peripheral and lower regions
//! (covid19), and a single high-contrast nodule (other_disease). The
//! signatures are geometric caricatures whose only job is to give the
//! pipeline a learnable, CPU-scale problem.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};
use crate::tensor::Tensor;

use super::{LabeledDataset, Provenance, Sample, SOURCE_CLASSES, TARGET_CLASSES};

/// Which label space to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// `normal` vs `diseased`; diseased images cycle through the three
    /// disease signatures.
    Binary,
    /// `normal`, `pneumonia`, `other_disease`, `covid19`.
    FourClass,
}

impl TaskKind {
    pub fn class_names(&self) -> Vec<String> {
        match self {
            TaskKind::Binary => SOURCE_CLASSES.iter().map(|s| s.to_string()).collect(),
            TaskKind::FourClass => TARGET_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Copy)]
enum Signature {
    Normal,
    Pneumonia,
    Covid,
    Nodule,
}

/// Generate `counts[c]` samples for each class. Deterministic in
/// `(counts, image_size, seed)`; pixel values are quantized to the 8-bit
/// grid so a written-and-reingested dataset is bit-identical.
pub fn generate_synthetic(
    task: TaskKind,
    counts: &[usize],
    image_size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let class_names = task.class_names();
    if counts.len() != class_names.len() {
        return Err(Error::Config(format!(
            "expected {} class counts, got {}",
            class_names.len(),
            counts.len()
        )));
    }
    if image_size < 32 {
        return Err(Error::Config(format!(
            "image size must be at least 32, got {image_size}"
        )));
    }

    let mut samples = Vec::with_capacity(counts.iter().sum());
    for (class, &count) in counts.iter().enumerate() {
        for i in 0..count {
            let signature = match (task, class) {
                (_, 0) => Signature::Normal,
                (TaskKind::Binary, _) => match i % 3 {
                    0 => Signature::Pneumonia,
                    1 => Signature::Covid,
                    _ => Signature::Nodule,
                },
                (TaskKind::FourClass, 1) => Signature::Pneumonia,
                (TaskKind::FourClass, 2) => Signature::Nodule,
                (TaskKind::FourClass, _) => Signature::Covid,
            };
            let mut rng = rng_from(seed, &[stream::DATA_GEN, class as u64, i as u64]);
            let pixels = render(signature, image_size, &mut rng);
            samples.push(Sample {
                image: Tensor::from_vec(&[1, image_size, image_size], pixels)?,
                label: class,
                id: format!("{}_{i:05}", class_names[class]),
            });
        }
    }
    LabeledDataset::new(samples, class_names, Provenance::Synthetic)
}

struct Blob {
    cx: f32,
    cy: f32,
    sigma: f32,
    amplitude: f32,
}

fn render(signature: Signature, size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut blobs: Vec<Blob> = Vec::new();
    match signature {
        Signature::Normal => {}
        Signature::Pneumonia => {
            // Dense patchy foci, anywhere in the frame.
            let n = rng.gen_range(2..=3);
            for _ in 0..n {
                blobs.push(Blob {
                    cx: rng.gen_range(0.15..0.85),
                    cy: rng.gen_range(0.15..0.85),
                    sigma: rng.gen_range(0.05..0.09),
                    amplitude: rng.gen_range(0.45..0.60),
                });
            }
        }
        Signature::Covid => {
            // Many wide, low-contrast blobs, biased peripheral and low.
            let n = rng.gen_range(5..=8);
            for _ in 0..n {
                let cx = if rng.gen_bool(0.5) {
                    rng.gen_range(0.05..0.3)
                } else {
                    rng.gen_range(0.7..0.95)
                };
                blobs.push(Blob {
                    cx,
                    cy: rng.gen_range(0.5..0.95),
                    sigma: rng.gen_range(0.10..0.16),
                    amplitude: rng.gen_range(0.18..0.26),
                });
            }
        }
        Signature::Nodule => {
            // A single small, high-contrast nodule.
            blobs.push(Blob {
                cx: rng.gen_range(0.2..0.8),
                cy: rng.gen_range(0.2..0.8),
                sigma: rng.gen_range(0.018..0.030),
                amplitude: rng.gen_range(0.65..0.80),
            });
        }
    }

    // Smooth lung field: two soft elliptical lobes over a dark background,
    // with a gentle low-frequency modulation and faint pixel noise.
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    let freq = rng.gen_range(0.8..1.4);
    let lobe_gain = rng.gen_range(0.22..0.27);

    let inv = 1.0 / (size - 1) as f32;
    let mut pixels = Vec::with_capacity(size * size);
    for yi in 0..size {
        let y = yi as f32 * inv;
        for xi in 0..size {
            let x = xi as f32 * inv;
            let mut v = 0.18;
            v += lobe_gain * (lobe(x, y, 0.32, 0.48, 0.13, 0.22) + lobe(x, y, 0.68, 0.48, 0.13, 0.22));
            v += 0.04
                * (std::f32::consts::TAU * freq * x + phase).sin()
                * (std::f32::consts::TAU * freq * y + phase).cos();
            for blob in &blobs {
                let dx = x - blob.cx;
                let dy = y - blob.cy;
                let d2 = (dx * dx + dy * dy) / (2.0 * blob.sigma * blob.sigma);
                if d2 < 12.0 {
                    v += blob.amplitude * (-d2).exp();
                }
            }
            v += rng.gen_range(-0.01..0.01);
            pixels.push(quantize(v));
        }
    }
    pixels
}

fn lobe(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> f32 {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    (-(dx * dx + dy * dy) / 2.0).exp()
}

fn quantize(v: f32) -> f32 {
    f32::from(super::pixel_to_u8(v)) / 255.0
}
