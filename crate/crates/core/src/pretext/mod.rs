//! The rotation pretext task: quarter-turn operator, buffered patch geometry,
//! image- and patch-rotation samples, batch assembly and the two-term loss.

mod rotate;

pub use rotate::{rotate_quarter, rotate_slice, RotationLabel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax_cross_entropy;
use crate::scalar::Scalar;
use crate::tensor::{Graph, SeededRng, Tensor, Var};

/// Geometry mapping an `H×W` image to the reassembled `H_pr×W_pr` pretext
/// image: `g_h×g_w` cells of side `cell`, from each of which a `crop`-pixel
/// square is cut (and resized to `p` when `crop < p`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferedGrid {
    pub h: usize,
    pub w: usize,
    pub p: usize,
    pub b: usize,
    pub cell: usize,
    pub crop: usize,
    pub g_h: usize,
    pub g_w: usize,
    pub h_pr: usize,
    pub w_pr: usize,
    pub n_pr: usize,
}

impl BufferedGrid {
    /// Cells of `P+B`, `P`-pixel crops; the pretext image shrinks.
    pub fn reduced(h: usize, w: usize, p: usize, b: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::arg("patch size must be at least 1"));
        }
        let cell = p + b;
        if cell > h.min(w) {
            return Err(Error::arg(format!("P+B = {cell} exceeds image side {}", h.min(w))));
        }
        let (g_h, g_w) = (h / cell, w / cell);
        Ok(Self {
            h,
            w,
            p,
            b,
            cell,
            crop: p,
            g_h,
            g_w,
            h_pr: p * g_h,
            w_pr: p * g_w,
            n_pr: g_h * g_w,
        })
    }

    /// Cells of `P`, `(P−B)`-pixel crops resized back to `P`; the pretext
    /// image keeps the full patch grid.
    pub fn original_size(h: usize, w: usize, p: usize, b: usize) -> Result<Self> {
        if p == 0 || b >= p {
            return Err(Error::arg(format!("original-size crops need B < P (P={p}, B={b})")));
        }
        if p > h.min(w) {
            return Err(Error::arg(format!("patch size {p} exceeds image side {}", h.min(w))));
        }
        let (g_h, g_w) = (h / p, w / p);
        Ok(Self {
            h,
            w,
            p,
            b,
            cell: p,
            crop: p - b,
            g_h,
            g_w,
            h_pr: p * g_h,
            w_pr: p * g_w,
            n_pr: g_h * g_w,
        })
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.g_h, self.g_w)
    }

    /// Top-left of the cell partition; centred when the cells do not tile
    /// the image exactly.
    fn origin(&self) -> (usize, usize) {
        ((self.h - self.g_h * self.cell) / 2, (self.w - self.g_w * self.cell) / 2)
    }
}

/// Reduced pretraining geometry: `H_pr = P·⌊H/(P+B)⌋`, likewise for `W`.
pub fn compute_reduced_geometry(h: usize, w: usize, p: usize, b: usize) -> Result<BufferedGrid> {
    BufferedGrid::reduced(h, w, p, b)
}

/// Ablation switches for batch assembly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextFlags {
    pub no_image_rot: bool,
    pub no_patch_rot: bool,
    pub rotate_img_and_patch: bool,
    pub original_size: bool,
    /// Debug: every rotation is the identity (label 0).
    pub force_zero_rotation: bool,
}

impl PretextFlags {
    pub fn validate(&self) -> Result<()> {
        if self.no_image_rot && self.no_patch_rot {
            return Err(Error::Config("no_image_rot and no_patch_rot leave nothing to learn".into()));
        }
        if self.rotate_img_and_patch && (self.no_patch_rot || self.no_image_rot) {
            return Err(Error::Config(
                "rotate_img_and_patch needs both image and patch rotation enabled".into(),
            ));
        }
        Ok(())
    }

    /// Geometry used for pretext images under these flags.
    pub fn grid(&self, h: usize, w: usize, p: usize, b: usize) -> Result<BufferedGrid> {
        if self.original_size {
            BufferedGrid::original_size(h, w, p, b)
        } else {
            BufferedGrid::reduced(h, w, p, b)
        }
    }

    pub fn samples_per_image(&self) -> usize {
        (if self.no_image_rot { 0 } else { 4 }) + usize::from(!self.no_patch_rot)
    }
}

fn draw_rotation(rng: &mut SeededRng, flags: &PretextFlags) -> usize {
    if flags.force_zero_rotation {
        0
    } else {
        rng.below(4)
    }
}

fn check_image<T: Scalar>(image: &Tensor<T>, grid: &BufferedGrid) -> Result<(usize, usize, usize)> {
    let shape = image.shape();
    let [c, h, w] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "pretext",
            detail: format!("expects C×H×W, got {shape:?}"),
        });
    };
    if h < grid.g_h * grid.cell || w < grid.g_w * grid.cell || h < grid.h_pr || w < grid.w_pr {
        return Err(Error::InvalidShape {
            op: "pretext",
            detail: format!("{h}x{w} image is smaller than the {}x{} pretext geometry", grid.g_h * grid.cell, grid.g_w * grid.cell),
        });
    }
    Ok((c, h, w))
}

fn crop<T: Scalar>(image: &Tensor<T>, y0: usize, x0: usize, ch: usize, cw: usize) -> Vec<T> {
    let shape = image.shape();
    let (c, w) = (shape[0], shape[2]);
    let h = shape[1];
    let src = image.data();
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in 0..ch {
            let row = (k * h + y0 + y) * w + x0;
            out.extend_from_slice(&src[row..row + cw]);
        }
    }
    out
}

/// Four rotations (labels `0..3`) of one random `H_pr×W_pr` crop; under
/// `original_size` geometry the crop is the whole image.
pub fn make_image_rotation_samples<T: Scalar>(
    image: &Tensor<T>,
    grid: &BufferedGrid,
    rng: &mut SeededRng,
) -> Result<Vec<(Tensor<T>, usize)>> {
    let (c, h, w) = check_image(image, grid)?;
    let y0 = rng.int_inclusive(0, h - grid.h_pr);
    let x0 = rng.int_inclusive(0, w - grid.w_pr);
    let base = Tensor::new(&[c, grid.h_pr, grid.w_pr], crop(image, y0, x0, grid.h_pr, grid.w_pr))?;
    (0..4).map(|k| Ok((rotate_quarter(&base, k)?, k))).collect()
}

/// A reassembled patch-rotation image with its per-patch labels and the
/// source top-left of every crop.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRotationSample<T> {
    pub image: Tensor<T>,
    pub labels: Vec<usize>,
    pub offsets: Vec<(usize, usize)>,
}

pub fn make_patch_rotation_sample<T: Scalar>(
    image: &Tensor<T>,
    grid: &BufferedGrid,
    rng: &mut SeededRng,
) -> Result<PatchRotationSample<T>> {
    make_patch_rotation_with(image, grid, rng, &PretextFlags::default())
}

fn make_patch_rotation_with<T: Scalar>(
    image: &Tensor<T>,
    grid: &BufferedGrid,
    rng: &mut SeededRng,
    flags: &PretextFlags,
) -> Result<PatchRotationSample<T>> {
    let (c, _, _) = check_image(image, grid)?;
    let (oy, ox) = grid.origin();
    let slack = grid.cell - grid.crop;
    let p = grid.p;
    let mut out = vec![T::zero(); c * grid.h_pr * grid.w_pr];
    let mut labels = Vec::with_capacity(grid.n_pr);
    let mut offsets = Vec::with_capacity(grid.n_pr);
    for gy in 0..grid.g_h {
        for gx in 0..grid.g_w {
            let sy = oy + gy * grid.cell + rng.int_inclusive(0, slack);
            let sx = ox + gx * grid.cell + rng.int_inclusive(0, slack);
            let mut patch = crop(image, sy, sx, grid.crop, grid.crop);
            if grid.crop != p {
                patch = resize_bilinear(&patch, c, grid.crop, p);
            }
            let k = draw_rotation(rng, flags);
            let patch = rotate_slice(&patch, c, p, p, k);
            for ch in 0..c {
                for y in 0..p {
                    let dst = (ch * grid.h_pr + gy * p + y) * grid.w_pr + gx * p;
                    out[dst..dst + p].copy_from_slice(&patch[(ch * p + y) * p..(ch * p + y + 1) * p]);
                }
            }
            labels.push(k);
            offsets.push((sy, sx));
        }
    }
    Ok(PatchRotationSample {
        image: Tensor::new(&[c, grid.h_pr, grid.w_pr], out)?,
        labels,
        offsets,
    })
}

/// Corner-aligned bilinear resize of `c` square planes from `from` to `to`.
fn resize_bilinear<T: Scalar>(src: &[T], c: usize, from: usize, to: usize) -> Vec<T> {
    let scale = if to > 1 { (from - 1) as f64 / (to - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(c * to * to);
    let at = |ch: usize, y: usize, x: usize| src[(ch * from + y) * from + x].to_f64().unwrap();
    for ch in 0..c {
        for y in 0..to {
            let fy = y as f64 * scale;
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(from - 1);
            for x in 0..to {
                let fx = x as f64 * scale;
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(from - 1);
                let v = (1.0 - ty) * ((1.0 - tx) * at(ch, y0, x0) + tx * at(ch, y0, x1))
                    + ty * ((1.0 - tx) * at(ch, y1, x0) + tx * at(ch, y1, x1));
                out.push(T::lit(v));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleTask {
    ImageRot,
    PatchRot,
}

/// `M` pretext samples with the rows scored by each head.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextBatch<T> {
    /// `M×C×H_pr×W_pr`.
    pub images: Tensor<T>,
    pub tasks: Vec<SampleTask>,
    /// Rows whose class-token logits are scored, with their labels.
    pub image_rows: Vec<usize>,
    pub image_labels: Vec<usize>,
    /// Rows whose patch logits are scored; labels flattened row-major,
    /// `n_pr` per row.
    pub patch_rows: Vec<usize>,
    pub patch_labels: Vec<usize>,
    pub n_pr: usize,
}

impl<T> PretextBatch<T> {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Expands `B_0` images into a pretext batch: per image, four rotations of a
/// crop and one patch-rotation sample (subject to `flags`). Each image draws
/// from its own stream forked off `rng`.
pub fn assemble_pretext_batch<T: Scalar>(
    images: &[Tensor<T>],
    grid: &BufferedGrid,
    rng: &SeededRng,
    flags: &PretextFlags,
) -> Result<PretextBatch<T>> {
    flags.validate()?;
    let first = images.first().ok_or_else(|| Error::arg("empty pretext batch"))?;
    let shape = first.shape().to_vec();
    let c = shape.first().copied().unwrap_or(0);
    let per_sample = c * grid.h_pr * grid.w_pr;
    if !flags.no_image_rot && grid.h_pr != grid.w_pr {
        return Err(Error::arg(format!(
            "quarter turns need a square pretext image, got {}x{}",
            grid.h_pr, grid.w_pr
        )));
    }
    let m = images.len() * flags.samples_per_image();
    let mut data = Vec::with_capacity(m * per_sample);
    let mut batch = PretextBatch {
        images: Tensor::zeros(&[0]),
        tasks: Vec::with_capacity(m),
        image_rows: Vec::new(),
        image_labels: Vec::new(),
        patch_rows: Vec::new(),
        patch_labels: Vec::new(),
        n_pr: grid.n_pr,
    };
    for (i, img) in images.iter().enumerate() {
        if img.shape() != &shape[..] {
            return Err(Error::shape("assemble_pretext_batch", &shape, img.shape()));
        }
        let mut srng = rng.fork("pretext-sample", i as u64);
        if !flags.no_image_rot {
            for (x, k) in make_image_rotation_samples(img, grid, &mut srng)? {
                let (x, label) = if flags.force_zero_rotation { (rotate_quarter(&x, (4 - k) % 4)?, 0) } else { (x, k) };
                batch.image_rows.push(batch.tasks.len());
                batch.image_labels.push(label);
                batch.tasks.push(SampleTask::ImageRot);
                data.extend_from_slice(x.data());
            }
        }
        if !flags.no_patch_rot {
            let sample = make_patch_rotation_with(img, grid, &mut srng, flags)?;
            let row = batch.tasks.len();
            let (x, labels) = if flags.rotate_img_and_patch {
                let g = draw_rotation(&mut srng, flags);
                batch.image_rows.push(row);
                batch.image_labels.push(g);
                let labels = rotate_patch_labels(&sample.labels, grid.g_h, grid.g_w, g);
                (rotate_quarter(&sample.image, g)?, labels)
            } else {
                (sample.image, sample.labels)
            };
            batch.patch_rows.push(row);
            batch.patch_labels.extend(labels);
            batch.tasks.push(SampleTask::PatchRot);
            data.extend_from_slice(x.data());
        }
    }
    batch.images = Tensor::new(&[batch.tasks.len(), c, grid.h_pr, grid.w_pr], data)?;
    Ok(batch)
}

/// Labels of a patch grid after the whole image turns by `g` quarter turns:
/// patches move with the image and each one's own rotation grows by `g`.
pub fn rotate_patch_labels(labels: &[usize], g_h: usize, g_w: usize, g: usize) -> Vec<usize> {
    let grid = Tensor::<f64>::new(&[1, g_h, g_w], labels.iter().map(|&l| l as f64).collect()).expect("label grid");
    let moved = rotate_quarter(&grid, g).expect("valid turn");
    moved.data().iter().map(|&l| (l as usize + g) % 4).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Mean of each term over its instances, then summed.
    #[default]
    Mean,
    /// Raw sums over all instances.
    Sum,
}

/// The loss and its two terms (absent when the batch has no such rows).
#[derive(Debug, Clone, Copy)]
pub struct PretextLoss {
    pub total: Var,
    pub image_term: Option<Var>,
    pub patch_term: Option<Var>,
}

/// Cross-entropy of the class head on image-rotation rows plus
/// cross-entropy of every patch head on patch-rotation rows.
pub fn patchrot_loss<T: Scalar>(
    g: &mut Graph<T>,
    cls_logits: Var,
    patch_logits: Option<Var>,
    batch: &PretextBatch<T>,
    reduction: LossReduction,
) -> Result<PretextLoss> {
    let m = batch.len();
    if g.shape(cls_logits).first() != Some(&m) {
        return Err(Error::shape("patchrot_loss", g.shape(cls_logits), &[m]));
    }
    let scale = |g: &mut Graph<T>, v: Var, count: usize| match reduction {
        LossReduction::Mean => Ok(v),
        LossReduction::Sum => g.scale(v, T::lit(count as f64)),
    };
    let image_term = if batch.image_rows.is_empty() {
        None
    } else {
        let rows = g.select(cls_logits, 0, &batch.image_rows)?;
        let ce = softmax_cross_entropy(g, rows, &batch.image_labels)?;
        Some(scale(g, ce, batch.image_rows.len())?)
    };
    let patch_term = if batch.patch_rows.is_empty() {
        None
    } else {
        let logits = patch_logits.ok_or_else(|| Error::arg("patch-rotation rows need patch logits"))?;
        let shape = g.shape(logits).to_vec();
        if shape.len() != 3 || shape[0] != m || shape[1] != batch.n_pr {
            return Err(Error::shape("patchrot_loss", &shape, &[m, batch.n_pr]));
        }
        let rows = g.select(logits, 0, &batch.patch_rows)?;
        let flat = g.reshape(rows, &[batch.patch_rows.len() * batch.n_pr, shape[2]])?;
        let ce = softmax_cross_entropy(g, flat, &batch.patch_labels)?;
        Some(scale(g, ce, batch.patch_labels.len())?)
    };
    let total = match (image_term, patch_term) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::arg("pretext batch has nothing to score")),
    };
    Ok(PretextLoss {
        total,
        image_term,
        patch_term,
    })
}

/// Correct/total counts of both pretext heads on a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PretextCounts {
    pub image_correct: usize,
    pub image_total: usize,
    pub patch_correct: usize,
    pub patch_total: usize,
}

impl PretextCounts {
    pub fn merge(&mut self, o: PretextCounts) {
        self.image_correct += o.image_correct;
        self.image_total += o.image_total;
        self.patch_correct += o.patch_correct;
        self.patch_total += o.patch_total;
    }

    pub fn image_accuracy(&self) -> f64 {
        self.image_correct as f64 / self.image_total.max(1) as f64
    }

    pub fn patch_accuracy(&self) -> f64 {
        self.patch_correct as f64 / self.patch_total.max(1) as f64
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn pretext_counts<T: Scalar>(cls: &Tensor<T>, patches: Option<&Tensor<T>>, batch: &PretextBatch<T>) -> PretextCounts {
    let mut out = PretextCounts::default();
    for (&r, &l) in batch.image_rows.iter().zip(&batch.image_labels) {
        out.image_total += 1;
        out.image_correct += usize::from(argmax(cls.row(r)) == l);
    }
    if let Some(p) = patches {
        let k = p.shape()[2];
        for (j, &r) in batch.patch_rows.iter().enumerate() {
            for n in 0..batch.n_pr {
                let off = (r * batch.n_pr + n) * k;
                out.patch_total += 1;
                let l = batch.patch_labels[j * batch.n_pr + n];
                out.patch_correct += usize::from(argmax(&p.data()[off..off + k]) == l);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
