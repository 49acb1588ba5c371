//! Real-time augmentation: random rotation, isotropic scaling, and
//! horizontal mirroring.
//!
//! Draws are made fresh for every epoch from a stream keyed by
//! (policy seed, epoch, sample index), so batch preparation order never
//! affects the result. The continuous warp uses bilinear resampling with
//! zero fill outside the frame; the mirror is a discrete flip, so applying
//! it twice restores the original pixels exactly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};
use crate::tensor::Tensor;

use super::Sample;

/// Ranges of the random transforms. The identity must lie inside every
/// range.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    /// Rotation angle is drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f32,
    /// Isotropic scale factor range; must contain 1.
    pub scale_lo: f32,
    pub scale_hi: f32,
    /// Probability of a horizontal mirror.
    pub mirror_prob: f32,
    /// Base seed of the draw stream.
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            rotation_deg: 15.0,
            scale_lo: 0.9,
            scale_hi: 1.1,
            mirror_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.rotation_deg < 0.0 {
            return Err(Error::Config("rotation range must be non-negative".into()));
        }
        if !(self.scale_lo <= 1.0 && 1.0 <= self.scale_hi && self.scale_lo > 0.0) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must contain 1 and be positive",
                self.scale_lo, self.scale_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::Config("mirror probability must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// The identity policy: a pixel-exact no-op.
    pub fn identity() -> Self {
        AugmentationPolicy {
            rotation_deg: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            mirror_prob: 0.0,
            seed: 0,
        }
    }

    /// Deterministic draw for a given epoch and sample index.
    pub fn draw_for(&self, epoch: usize, sample_index: usize) -> AugmentDraw {
        let mut rng = rng_from(
            self.seed,
            &[stream::AUGMENT, epoch as u64, sample_index as u64],
        );
        let angle_deg = if self.rotation_deg > 0.0 {
            rng.gen_range(-self.rotation_deg..self.rotation_deg)
        } else {
            0.0
        };
        let scale = if self.scale_lo < self.scale_hi {
            rng.gen_range(self.scale_lo..self.scale_hi)
        } else {
            self.scale_lo
        };
        let mirror = rng.gen_bool(f64::from(self.mirror_prob));
        AugmentDraw {
            angle_rad: angle_deg.to_radians(),
            scale,
            mirror,
        }
    }
}

/// Realized transform parameters for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub angle_rad: f32,
    pub scale: f32,
    pub mirror: bool,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            angle_rad: 0.0,
            scale: 1.0,
            mirror: false,
        }
    }
}

/// Apply a draw to a sample: rotate and scale about the image center with
/// bilinear resampling (zero padding), then mirror horizontally. Output
/// pixels are clamped to `[0, 1]`.
pub fn augment(sample: &Sample, draw: &AugmentDraw) -> Sample {
    let shape = sample.image.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let src = sample.image.data();

    let warped: Vec<f32> = if draw.angle_rad == 0.0 && draw.scale == 1.0 {
        src.to_vec()
    } else {
        let cy = (h as f32 - 1.0) / 2.0;
        let cx = (w as f32 - 1.0) / 2.0;
        let cos = draw.angle_rad.cos();
        let sin = draw.angle_rad.sin();
        let inv_scale = 1.0 / draw.scale;
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            let dy = y as f32 - cy;
            for x in 0..w {
                let dx = x as f32 - cx;
                // Inverse map of rotate-then-scale about the center.
                let sx = cx + inv_scale * (cos * dx + sin * dy);
                let sy = cy + inv_scale * (-sin * dx + cos * dy);
                out.push(bilinear(src, h, w, sx, sy).clamp(0.0, 1.0));
            }
        }
        out
    };

    let data = if draw.mirror {
        let mut flipped = Vec::with_capacity(h * w);
        for y in 0..h {
            let row = &warped[y * w..(y + 1) * w];
            flipped.extend(row.iter().rev());
        }
        flipped
    } else {
        warped
    };

    Sample {
        image: Tensor::from_vec(&shape, data).expect("augmented image keeps its shape"),
        label: sample.label,
        id: sample.id.clone(),
    }
}

/// Bilinear lookup with zero outside the frame.
fn bilinear(src: &[f32], h: usize, w: usize, x: f32, y: f32) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut acc = 0.0f32;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let xi = x0 as i64 + dx;
            let yi = y0 as i64 + dy;
            if xi >= 0 && (xi as usize) < w && yi >= 0 && (yi as usize) < h {
                acc += wy * wx * src[yi as usize * w + xi as usize];
            }
        }
    }
    acc
}
