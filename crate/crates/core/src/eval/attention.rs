use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionRecord, ForwardCtx};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};
use crate::vit::ViTModel;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMethod {
    /// Class-token row of the final block, averaged over heads.
    #[default]
    Last,
    /// Attention rollout: product of head-averaged maps with residual mixing.
    Rollout,
}

impl std::str::FromStr for AttnMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "last" => Ok(AttnMethod::Last),
            "rollout" => Ok(AttnMethod::Rollout),
            other => Err(Error::Config(format!("unknown attention method `{other}` (last, rollout)"))),
        }
    }
}

/// Where the class token looks, per patch, for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub grid: (usize, usize),
    /// Row-major `g_h×g_w` attention mass summing to 1.
    pub cells: Vec<f64>,
    pub h: usize,
    pub w: usize,
    /// Bilinear upsampling of `cells` to `h×w`, rescaled to `[0, 1]` (all
    /// zero when the map is flat).
    pub rendering: Vec<f64>,
}

fn head_mean(rec: &AttentionRecord, b: usize) -> Vec<f64> {
    let t = rec.tokens;
    let mut out = vec![0.0; t * t];
    for head in 0..rec.heads {
        for q in 0..t {
            for (o, v) in out[q * t..(q + 1) * t].iter_mut().zip(rec.row(b, head, q)) {
                *o += v / rec.heads as f64;
            }
        }
    }
    out
}

fn class_row(records: &[AttentionRecord], method: AttnMethod) -> Result<Vec<f64>> {
    let last = records
        .last()
        .ok_or_else(|| Error::Graph("no attention was traced; tracing unavailable".into()))?;
    let t = last.tokens;
    match method {
        AttnMethod::Last => Ok(head_mean(last, 0)[..t].to_vec()),
        AttnMethod::Rollout => {
            let mut acc: Vec<f64> = (0..t * t).map(|i| if i / t == i % t { 1.0 } else { 0.0 }).collect();
            for rec in records {
                let a = head_mean(rec, 0);
                let mut mixed = vec![0.0; t * t];
                for q in 0..t {
                    let row = &a[q * t..(q + 1) * t];
                    // Residual mixing 0.5·A + 0.5·I, rows renormalised.
                    let s: f64 = 0.5 * row.iter().sum::<f64>() + 0.5;
                    for k in 0..t {
                        mixed[q * t + k] = (0.5 * row[k] + if q == k { 0.5 } else { 0.0 }) / s;
                    }
                }
                let mut next = vec![0.0; t * t];
                for i in 0..t {
                    for k in 0..t {
                        let m = mixed[i * t + k];
                        if m != 0.0 {
                            for j in 0..t {
                                next[i * t + j] += m * acc[k * t + j];
                            }
                        }
                    }
                }
                acc = next;
            }
            Ok(acc[..t].to_vec())
        }
    }
}

/// Attention map of one `C×H×W` image (eval mode, dropout off).
pub fn attention_map<T: Scalar>(model: &ViTModel<T>, image: &Tensor<T>, method: AttnMethod) -> Result<AttentionMap> {
    let shape = image.shape();
    let [c, h, w] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "attention_map",
            detail: format!("expects C×H×W, got {shape:?}"),
        });
    };
    let batch = image.reshape(&[1, c, h, w])?;
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::eval().with_trace();
    model.encode(&mut g, &batch, &mut ctx)?;
    let row = class_row(&ctx.attention, method)?;
    let patches = &row[1..];
    let total: f64 = patches.iter().sum();
    if total <= 0.0 {
        return Err(Error::NonFinite("class token puts no attention on patches".into()));
    }
    let cells: Vec<f64> = patches.iter().map(|v| v / total).collect();
    let grid = model.grid();
    let rendering = render(&cells, grid, h, w);
    Ok(AttentionMap {
        grid,
        cells,
        h,
        w,
        rendering,
    })
}

/// Half-pixel bilinear upsampling of a grid to `h×w`.
fn upsample(cells: &[f64], grid: (usize, usize), h: usize, w: usize) -> Vec<f64> {
    let (gh, gw) = grid;
    let sample = |pos: f64, n: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let lo = p.floor() as usize;
        (lo, (lo + 1).min(n - 1), p - lo as f64)
    };
    let mut up = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = sample((y as f64 + 0.5) * gh as f64 / h as f64 - 0.5, gh);
        for x in 0..w {
            let (x0, x1, fx) = sample((x as f64 + 0.5) * gw as f64 / w as f64 - 0.5, gw);
            let v = (1.0 - fy) * ((1.0 - fx) * cells[y0 * gw + x0] + fx * cells[y0 * gw + x1])
                + fy * ((1.0 - fx) * cells[y1 * gw + x0] + fx * cells[y1 * gw + x1]);
            up.push(v);
        }
    }
    up
}

/// [`upsample`] followed by min–max scaling to `[0, 1]`.
fn render(cells: &[f64], grid: (usize, usize), h: usize, w: usize) -> Vec<f64> {
    let up = upsample(cells, grid, h, w);
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Relative spread below 1e-9 is rounding noise on a flat map.
    if hi - lo <= 1e-9 * hi.abs().max(1e-300) {
        return vec![0.0; up.len()];
    }
    up.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

impl AttentionMap {
    /// Upsampled `h×w` map before display scaling.
    pub fn upsampled_raw(&self) -> Vec<f64> {
        upsample(&self.cells, self.grid, self.h, self.w)
    }

    /// Binary PGM (`P5`, maxval 255) of the rendering.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(self.rendering.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }

    /// Grid cells as CSV, one grid row per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.cells.chunks(self.grid.1) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.8}")).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pgm = dir.join(format!("{stem}.pgm"));
        fs::write(&pgm, self.to_pgm()).map_err(|e| Error::io(&pgm, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Distribution, SeededRng};
    use crate::vit::ViTConfig;

    fn model() -> ViTModel<f64> {
        let cfg = ViTConfig {
            image_h: 16,
            image_w: 16,
            embed_dim: 8,
            n_blocks: 2,
            n_heads: 2,
            expansion: 16,
            ..ViTConfig::default()
        };
        ViTModel::for_classification(&cfg, &mut SeededRng::new(1, 0)).unwrap()
    }

    fn image(seed: u64) -> Tensor<f64> {
        SeededRng::new(seed, 0).draw(Distribution::UniformReal, &[3, 16, 16]).unwrap()
    }

    #[test]
    fn zeroed_query_key_gives_flat_map() {
        let mut m = model();
        for b in &mut m.blocks {
            for lin in [&mut b.attn.query, &mut b.attn.key] {
                lin.weight.tensor = Tensor::zeros(lin.weight.tensor.shape());
                lin.bias.tensor = Tensor::zeros(lin.bias.tensor.shape());
            }
        }
        for method in [AttnMethod::Last, AttnMethod::Rollout] {
            let map = attention_map(&m, &image(0), method).unwrap();
            assert!(map.cells.iter().all(|&c| (c - 1.0 / 16.0).abs() < 1e-12), "{method:?}");
            assert!(map.rendering.iter().all(|&v| v == 0.0));
            assert_eq!(map.to_pgm().len(), "P5\n16 16\n255\n".len() + 256);
        }
    }

    #[test]
    fn cells_sum_to_one_and_render_spans_unit_range() {
        let m = model();
        for method in [AttnMethod::Last, AttnMethod::Rollout] {
            let map = attention_map(&m, &image(3), method).unwrap();
            assert!((map.cells.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            let lo = map.rendering.iter().copied().fold(1.0, f64::min);
            let hi = map.rendering.iter().copied().fold(0.0, f64::max);
            assert_eq!((lo, hi), (0.0, 1.0));
        }
    }

    #[test]
    fn constant_grid_upsamples_to_constant() {
        let up = render(&[0.25; 4], (2, 2), 7, 5);
        assert!(up.iter().all(|&v| v == 0.0));
        let raw = AttentionMap {
            grid: (2, 2),
            cells: vec![0.25; 4],
            h: 7,
            w: 5,
            rendering: up,
        }
        .upsampled_raw();
        assert!(raw.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn map_ignores_batch_company() {
        let m = model();
        let img = image(5);
        let alone = attention_map(&m, &img, AttnMethod::Last).unwrap();
        // Same image inside a batch of three.
        let mut data = image(6).into_data();
        data.extend_from_slice(img.data());
        data.extend(image(7).into_data());
        let batch = Tensor::new(&[3, 3, 16, 16], data).unwrap();
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval().with_trace();
        m.encode(&mut g, &batch, &mut ctx).unwrap();
        let rec = ctx.attention.last().unwrap();
        let mut row = head_mean(rec, 1)[..17].to_vec();
        let s: f64 = row[1..].iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
        for (a, b) in alone.cells.iter().zip(&row[1..]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
