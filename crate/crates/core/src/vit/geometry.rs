use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Splits `C×H×W` into non-overlapping `P×P` patches in row-major order,
/// each flattened channel-first: `N×(C·P·P)`.
pub fn tokenize<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let shape = image.shape();
    let [c, h, w] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "tokenize",
            detail: format!("expects C×H×W, got {shape:?}"),
        });
    };
    let batch = image.reshape(&[1, c, h, w])?;
    let out = tokenize_batch(&batch, p)?;
    let dims = out.shape()[1..].to_vec();
    out.reshape(&dims)
}

/// Batched [`tokenize`]: `B×C×H×W → B×N×(C·P·P)`.
pub fn tokenize_batch<T: Scalar>(images: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let shape = images.shape();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "tokenize",
            detail: format!("expects B×C×H×W, got {shape:?}"),
        });
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidShape {
            op: "tokenize",
            detail: format!("{h}x{w} image is not divisible into {p}-pixel patches"),
        });
    }
    let (gh, gw) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        let img = &src[bi * c * h * w..(bi + 1) * c * h * w];
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for y in 0..p {
                        let row = (ch * h + py * p + y) * w + px * p;
                        out.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, gh * gw, c * p * p], out)
}

/// Bilinear resampling (corner-aligned) of the patch rows of a positional
/// embedding `(N+1)×h` from `old` to `new` grid; row 0 (class token) is
/// copied unchanged.
pub fn interpolate_pos_embed<T: Scalar>(pe: &Tensor<T>, old: (usize, usize), new: (usize, usize)) -> Result<Tensor<T>> {
    let shape = pe.shape();
    let [rows, h] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "interpolate_pos_embed",
            detail: format!("expects (N+1)×h, got {shape:?}"),
        });
    };
    if rows != old.0 * old.1 + 1 || old.0 == 0 || old.1 == 0 || new.0 == 0 || new.1 == 0 {
        return Err(Error::InvalidShape {
            op: "interpolate_pos_embed",
            detail: format!("{rows} rows do not match a {old:?} grid plus class token (target {new:?})"),
        });
    }
    if old == new {
        return Ok(pe.clone());
    }
    let src = pe.data();
    let mut out = Vec::with_capacity((new.0 * new.1 + 1) * h);
    out.extend_from_slice(&src[..h]);
    let coord = |i: usize, n_new: usize, n_old: usize| -> (usize, usize, f64) {
        if n_new == 1 || n_old == 1 {
            let pos = if n_new == 1 { (n_old - 1) as f64 / 2.0 } else { 0.0 };
            let lo = pos.floor() as usize;
            return (lo, (lo + 1).min(n_old - 1), pos - lo as f64);
        }
        let pos = i as f64 * (n_old - 1) as f64 / (n_new - 1) as f64;
        let lo = (pos.floor() as usize).min(n_old - 1);
        let hi = (lo + 1).min(n_old - 1);
        (lo, hi, pos - lo as f64)
    };
    let cell = |y: usize, x: usize| 1 + y * old.1 + x;
    for y in 0..new.0 {
        let (y0, y1, fy) = coord(y, new.0, old.0);
        for x in 0..new.1 {
            let (x0, x1, fx) = coord(x, new.1, old.1);
            let weights = [
                ((1.0 - fy) * (1.0 - fx), cell(y0, x0)),
                ((1.0 - fy) * fx, cell(y0, x1)),
                (fy * (1.0 - fx), cell(y1, x0)),
                (fy * fx, cell(y1, x1)),
            ];
            for ch in 0..h {
                let v: f64 = weights
                    .iter()
                    .map(|&(wgt, r)| wgt * src[r * h + ch].to_f64().unwrap())
                    .sum();
                out.push(T::lit(v));
            }
        }
    }
    Tensor::new(&[new.0 * new.1 + 1, h], out)
}
