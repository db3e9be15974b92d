use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A rotation by `90°·ι`, `ι ∈ {0, 1, 2, 3}`; composition adds modulo 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RotationLabel(u8);

impl RotationLabel {
    pub fn new(quarter_turns: usize) -> Result<Self> {
        if quarter_turns > 3 {
            return Err(Error::arg(format!("rotation label {quarter_turns} outside 0..=3")));
        }
        Ok(Self(quarter_turns as u8))
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    pub fn degrees(self) -> u32 {
        90 * self.0 as u32
    }

    pub fn compose(self, other: RotationLabel) -> RotationLabel {
        RotationLabel((self.0 + other.0) % 4)
    }

    pub fn inverse(self) -> RotationLabel {
        RotationLabel((4 - self.0) % 4)
    }
}

impl fmt::Display for RotationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}°", self.degrees())
    }
}

/// Counter-clockwise rotation of `c` planes of `h×w` by `k` quarter turns.
/// One turn maps `out[i][j] = in[j][w-1-i]` (output is `w×h`).
pub fn rotate_slice<X: Copy>(src: &[X], c: usize, h: usize, w: usize, k: usize) -> Vec<X> {
    debug_assert_eq!(src.len(), c * h * w);
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        match k % 4 {
            0 => out.extend_from_slice(plane),
            1 => {
                for i in 0..w {
                    for j in 0..h {
                        out.push(plane[j * w + (w - 1 - i)]);
                    }
                }
            }
            2 => out.extend(plane.iter().rev()),
            _ => {
                for i in 0..w {
                    for j in 0..h {
                        out.push(plane[(h - 1 - j) * w + i]);
                    }
                }
            }
        }
    }
    out
}

/// Exact quarter-turn rotation of a `C×H×W` image by `90°·ι`
/// counter-clockwise.
pub fn rotate_quarter<X: Scalar>(image: &Tensor<X>, iota: usize) -> Result<Tensor<X>> {
    if iota > 3 {
        return Err(Error::arg(format!("rotation label {iota} outside 0..=3")));
    }
    let shape = image.shape();
    let [c, h, w] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "rotate_quarter",
            detail: format!("expects C×H×W, got {shape:?}"),
        });
    };
    let out = rotate_slice(image.data(), c, h, w, iota);
    let dims = if iota % 2 == 1 { [c, w, h] } else { [c, h, w] };
    Tensor::new(&dims, out)
}
