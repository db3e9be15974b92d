use serde::{Deserialize, Serialize};

use super::DatasetMeta;
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

/// Standard light augmentation: zero-pad, random crop back to size,
/// horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub pad: usize,
    pub random_crop: bool,
    pub hflip: bool,
    /// When false, crop offsets stay inside the unpadded image so the output
    /// only contains original pixels.
    pub allow_zero_padding: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pad: 4,
            random_crop: true,
            hflip: true,
            allow_zero_padding: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            pad: 0,
            random_crop: false,
            hflip: false,
            allow_zero_padding: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && (!self.random_crop || self.pad == 0 || !self.allow_zero_padding)
    }

    pub fn policy_id(&self) -> String {
        if self.is_identity() {
            "none".into()
        } else {
            format!(
                "pad{}{}{}",
                if self.random_crop && self.allow_zero_padding { self.pad } else { 0 },
                if self.random_crop { "-crop" } else { "" },
                if self.hflip { "-flip" } else { "" }
            )
        }
    }
}

/// Augments one `C×H×W` image (values in `[0, 1]`), returning the same shape.
pub fn augment(pixels: &[f32], shape: (usize, usize, usize), cfg: &AugmentConfig, rng: &mut SeededRng) -> Vec<f32> {
    let (c, h, w) = shape;
    debug_assert_eq!(pixels.len(), c * h * w);
    let pad = if cfg.random_crop && cfg.allow_zero_padding { cfg.pad } else { 0 };
    // Offset into the padded canvas; the source pixel is (y + oy - pad).
    let (oy, ox) = if pad > 0 {
        (rng.int_inclusive(0, 2 * pad), rng.int_inclusive(0, 2 * pad))
    } else {
        (pad, pad)
    };
    let flip = cfg.hflip && rng.bernoulli(0.5);
    let mut out = vec![0.0; pixels.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + oy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = (xx + ox) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = pixels[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Per-channel `(x - mean) / std`.
pub fn normalize(pixels: &[f32], meta: &DatasetMeta) -> Result<Vec<f32>> {
    channel_map(pixels, meta, |v, m, s| (v - m) / s)
}

pub fn denormalize(pixels: &[f32], meta: &DatasetMeta) -> Result<Vec<f32>> {
    channel_map(pixels, meta, |v, m, s| v * s + m)
}

fn channel_map(pixels: &[f32], meta: &DatasetMeta, f: impl Fn(f32, f32, f32) -> f32) -> Result<Vec<f32>> {
    let c = meta.c;
    if meta.channel_std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return Err(Error::arg("channel std must be non-zero and finite"));
    }
    if c == 0 || pixels.len() % c != 0 || meta.channel_mean.len() != c || meta.channel_std.len() != c {
        return Err(Error::InvalidShape {
            op: "normalize",
            detail: format!("{} values for {c} channels", pixels.len()),
        });
    }
    let plane = pixels.len() / c;
    Ok(pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / plane;
            f(v, meta.channel_mean[ch], meta.channel_std[ch])
        })
        .collect())
}
