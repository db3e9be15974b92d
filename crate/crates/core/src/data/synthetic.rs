use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

pub const SYNTHETIC_CLASSES: usize = 10;

/// Glyph outlines in a unit frame (`x` right, `y` down, "up" is `-y`), each a
/// union of convex polygons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    Arrow,
    Wedge,
    L,
    T,
}

const ARROW: &[&[(f64, f64)]] = &[
    &[(-0.09, -0.12), (0.09, -0.12), (0.09, 0.45), (-0.09, 0.45)],
    &[(0.0, -0.45), (0.32, -0.08), (-0.32, -0.08)],
];
const WEDGE: &[&[(f64, f64)]] = &[
    &[(0.0, -0.45), (0.12, -0.32), (-0.28, 0.42), (-0.42, 0.30)],
    &[(0.0, -0.45), (0.42, 0.30), (0.28, 0.42), (-0.12, -0.32)],
];
const L_SHAPE: &[&[(f64, f64)]] = &[
    &[(-0.32, -0.45), (-0.12, -0.45), (-0.12, 0.45), (-0.32, 0.45)],
    &[(-0.32, 0.25), (0.32, 0.25), (0.32, 0.45), (-0.32, 0.45)],
];
const T_SHAPE: &[&[(f64, f64)]] = &[
    &[(-0.42, -0.45), (0.42, -0.45), (0.42, -0.25), (-0.42, -0.25)],
    &[(-0.1, -0.45), (0.1, -0.45), (0.1, 0.45), (-0.1, 0.45)],
];

impl Glyph {
    pub const ALL: [Glyph; 4] = [Glyph::Arrow, Glyph::Wedge, Glyph::L, Glyph::T];

    fn polygons(self) -> &'static [&'static [(f64, f64)]] {
        match self {
            Glyph::Arrow => ARROW,
            Glyph::Wedge => WEDGE,
            Glyph::L => L_SHAPE,
            Glyph::T => T_SHAPE,
        }
    }

    /// Whether the unit-frame point lies on the glyph.
    pub fn contains(self, x: f64, y: f64) -> bool {
        self.polygons().iter().any(|poly| inside_convex(poly, x, y))
    }
}

/// Point-in-convex-polygon by consistent edge orientation.
fn inside_convex(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut sign = 0.0f64;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

/// Glyph and tilt of class `k`. Tilts stay within ±45° of upright, so no
/// quarter turn maps a class onto any other.
pub fn class_glyph(k: usize) -> (Glyph, f64) {
    (Glyph::ALL[k % 4], class_angle(k))
}

/// Tilt of class `k` in degrees (counter-clockwise positive).
pub fn class_angle(k: usize) -> f64 {
    -40.5 + 9.0 * k as f64
}

/// Rendering knobs of [`gen_synthetic_oriented_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStyle {
    /// Peak-to-peak amplitude of the oriented sawtooth texture.
    pub texture_amp: (f64, f64),
    pub period: (f64, f64),
    /// Brightness added on the glyph.
    pub glyph_amp: (f64, f64),
    /// Glyph side length as a fraction of the canvas.
    pub glyph_scale: (f64, f64),
    pub center_jitter: f64,
    pub angle_jitter: f64,
    /// Per-channel background level.
    pub base: (f64, f64),
    /// Amplitude of smooth isotropic clutter blobs.
    pub clutter_amp: f64,
    pub clutter_blobs: usize,
    pub noise_std: f64,
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        Self {
            texture_amp: (0.25, 0.45),
            period: (4.0, 6.0),
            glyph_amp: (0.2, 0.3),
            glyph_scale: (0.75, 0.9),
            center_jitter: 2.0,
            angle_jitter: 1.5,
            base: (0.35, 0.65),
            clutter_amp: 0.15,
            clutter_blobs: 4,
            noise_std: 0.04,
        }
    }
}

/// Asymmetric sawtooth: slow rise, sharp drop.
fn saw(t: f64) -> f64 {
    t - t.floor()
}

fn between(rng: &mut SeededRng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

/// [`gen_synthetic_oriented_with`] at the default style.
pub fn gen_synthetic_oriented(n: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    gen_synthetic_oriented_with(n, h, w, seed, &SyntheticStyle::default())
}

/// Ten classes of tilted glyphs (arrow, wedge, L, T) over texture noise.
///
/// Each canvas carries an asymmetric sawtooth texture whose ramp follows
/// the class tilt, so every patch shows which way is up; the glyph, drawn
/// at the same tilt, adds a global shape cue. Colour, contrast, period,
/// placement and smooth clutter vary per image. Labels are balanced (±1)
/// and everything is a function of `seed`.
pub fn gen_synthetic_oriented_with(n: usize, h: usize, w: usize, seed: u64, style: &SyntheticStyle) -> Result<Dataset> {
    if n < SYNTHETIC_CLASSES {
        return Err(Error::arg(format!("need at least {SYNTHETIC_CLASSES} images, got {n}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::arg("image size must be positive"));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % SYNTHETIC_CLASSES).collect();
    SeededRng::derive(seed, "synthetic-labels", 0, 0).shuffle(&mut labels);
    let c = 3;
    let side = h.min(w) as f64;
    let mut images = Vec::with_capacity(n * c * h * w);
    for (i, &k) in labels.iter().enumerate() {
        let mut rng = SeededRng::derive(seed, "synthetic", 0, i as u64);
        let (glyph, angle) = class_glyph(k);
        let theta = (angle + style.angle_jitter * (2.0 * rng.uniform() - 1.0)).to_radians();
        let period = between(&mut rng, style.period);
        let phase = rng.uniform();
        let tex_amp = between(&mut rng, style.texture_amp);
        let glyph_amp = between(&mut rng, style.glyph_amp);
        let scale = between(&mut rng, style.glyph_scale) * side;
        let cy = (h as f64 - 1.0) / 2.0 + style.center_jitter * (2.0 * rng.uniform() - 1.0);
        let cx = (w as f64 - 1.0) / 2.0 + style.center_jitter * (2.0 * rng.uniform() - 1.0);
        let base: Vec<f64> = (0..c).map(|_| between(&mut rng, style.base)).collect();
        let tint: Vec<f64> = (0..c).map(|_| 0.7 + 0.3 * rng.uniform()).collect();
        let blobs: Vec<(f64, f64, f64, f64)> = (0..style.clutter_blobs)
            .map(|_| {
                let by = rng.uniform() * h as f64;
                let bx = rng.uniform() * w as f64;
                let r = side * (0.1 + 0.2 * rng.uniform());
                let a = style.clutter_amp * (2.0 * rng.uniform() - 1.0);
                (by, bx, r, a)
            })
            .collect();
        // Tilted frame: `u` runs "down" the glyph.
        let (sin, cos) = theta.sin_cos();
        let mut plane = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 - cy, x as f64 - cx);
                let u = py * cos - px * sin;
                let mut val = tex_amp * (saw(u / period + phase) - 0.5);
                // 2×2 supersampled coverage for smooth edges.
                let mut cover = 0.0;
                for (oy, ox) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
                    let (qy, qx) = (py + oy, px + ox);
                    let gu = (qy * cos - qx * sin) / scale;
                    let gv = (qy * sin + qx * cos) / scale;
                    if glyph.contains(gv, gu) {
                        cover += 0.25;
                    }
                }
                val += glyph_amp * cover;
                for &(by, bx, r, a) in &blobs {
                    let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                    val += a * (-d2 / (2.0 * r * r)).exp();
                }
                plane[y * w + x] = val;
            }
        }
        for ch in 0..c {
            for &v in &plane {
                let px = base[ch] + tint[ch] * v + rng.normal(0.0, style.noise_std);
                images.push(px.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let mut ds = Dataset::new("synthetic-oriented", (c, h, w), SYNTHETIC_CLASSES, images, labels)?;
    ds.meta.name = format!("synthetic-oriented-{seed}");
    Ok(ds)
}
