//! Image datasets: loaders for CIFAR binary, IDX and PRIMG1 archives, a
//! synthetic oriented-glyph generator, augmentation and normalisation.

mod augment;
mod formats;
mod synthetic;

pub use augment::{augment, denormalize, normalize, AugmentConfig};
pub use formats::{load_cifar_binary, load_idx, load_raw_archive, write_raw_archive};
pub use synthetic::{class_angle, class_glyph, gen_synthetic_oriented, gen_synthetic_oriented_with, Glyph, SyntheticStyle, SYNTHETIC_CLASSES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub n_classes: usize,
    pub channel_mean: Vec<f32>,
    pub channel_std: Vec<f32>,
    pub augment: String,
}

/// `n` images of shape `C×H×W` with values in `[0, 1]`, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(name: &str, shape: (usize, usize, usize), n_classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let (c, h, w) = shape;
        let per = c * h * w;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::InvalidShape {
                op: "dataset",
                detail: format!("{} values for {} images of {c}x{h}x{w}", images.len(), labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::arg(format!("label {bad} out of range for {n_classes} classes")));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg("pixel values must lie in [0, 1]"));
        }
        let mut ds = Self {
            images,
            labels,
            meta: DatasetMeta {
                name: name.to_string(),
                c,
                h,
                w,
                n_classes,
                channel_mean: vec![0.0; c],
                channel_std: vec![1.0; c],
                augment: "none".into(),
            },
        };
        ds.compute_channel_stats();
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.meta.c, self.meta.h, self.meta.w)
    }

    pub fn image_len(&self) -> usize {
        self.meta.c * self.meta.h * self.meta.w
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn all_pixels(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        Tensor::new(&[self.meta.c, self.meta.h, self.meta.w], self.pixels(i).to_vec()).expect("consistent image shape")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Recomputes per-channel mean and std (std floored at 1e-3).
    pub fn compute_channel_stats(&mut self) {
        let (c, hw) = (self.meta.c, self.meta.h * self.meta.w);
        let n = self.len();
        for ch in 0..c {
            let (mut s, mut s2) = (0f64, 0f64);
            for i in 0..n {
                let base = i * c * hw + ch * hw;
                for &v in &self.images[base..base + hw] {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
            }
            let count = (n * hw).max(1) as f64;
            let mean = s / count;
            let var = (s2 / count - mean * mean).max(0.0);
            self.meta.channel_mean[ch] = mean as f32;
            self.meta.channel_std[ch] = (var.sqrt() as f32).max(1e-3);
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            images.extend_from_slice(self.pixels(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Seeded split into `(rest, held_out)` with `fraction` of the images
    /// held out (at least one when the dataset has two or more images).
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        SeededRng::derive(seed, "split", 0, 0).shuffle(&mut idx);
        let mut k = (self.len() as f64 * fraction).round() as usize;
        if fraction > 0.0 && k == 0 && self.len() >= 2 {
            k = 1;
        }
        let (held, rest) = idx.split_at(k.min(self.len()));
        let (mut held, mut rest) = (held.to_vec(), rest.to_vec());
        held.sort_unstable();
        rest.sort_unstable();
        (self.subset(&rest), self.subset(&held))
    }

    /// Seeded class-stratified subset of `count` images: per-class counts
    /// differ by at most one.
    pub fn stratified_subset(&self, count: usize, seed: u64) -> Result<Dataset> {
        let k = self.meta.n_classes;
        if count < k {
            return Err(Error::arg(format!("{count} labels cannot cover {k} classes")));
        }
        if count > self.len() {
            return Err(Error::arg(format!("{count} labels requested from {} images", self.len())));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut rng = SeededRng::derive(seed, "stratified", count as u64, 0);
        for bucket in &mut by_class {
            rng.shuffle(bucket);
        }
        // Round-robin over classes in a seeded order keeps counts within one.
        let mut order: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut order);
        let mut taken = vec![0usize; k];
        let mut picked = Vec::with_capacity(count);
        while picked.len() < count {
            let before = picked.len();
            for &cls in &order {
                if picked.len() == count {
                    break;
                }
                if taken[cls] < by_class[cls].len() {
                    picked.push(by_class[cls][taken[cls]]);
                    taken[cls] += 1;
                }
            }
            if picked.len() == before {
                break;
            }
        }
        let max = taken.iter().max().copied().unwrap_or(0);
        let min = taken.iter().min().copied().unwrap_or(0);
        if max - min > 1 {
            return Err(Error::arg(format!(
                "class sizes too uneven for a stratified draw of {count}"
            )));
        }
        picked.sort_unstable();
        Ok(self.subset(&picked))
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.meta.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Normalised `B×C×H×W` tensor of the given images.
    pub fn batch_tensor<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let (c, h, w) = self.shape();
        let hw = h * w;
        let mut data = Vec::with_capacity(indices.len() * c * hw);
        for &i in indices {
            let px = self.pixels(i);
            for ch in 0..c {
                let (m, s) = (self.meta.channel_mean[ch], self.meta.channel_std[ch]);
                data.extend(px[ch * hw..(ch + 1) * hw].iter().map(|&v| T::lit(((v - m) / s) as f64)));
            }
        }
        Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape")
    }
}
