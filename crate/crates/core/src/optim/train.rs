//! Pretraining and supervised training loops.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{save_checkpoint, AdamW, AdamWConfig, LrSchedule};
use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::eval::topk_accuracy;
use crate::nn::{softmax_cross_entropy, ForwardCtx, Module};
use crate::pretext::{assemble_pretext_batch, patchrot_loss, pretext_counts, BufferedGrid, LossReduction, PretextCounts, PretextFlags};
use crate::scalar::Scalar;
use crate::tensor::{Graph, SeededRng, Tensor};
use crate::vit::{apply_freeze, FreezeSpec, Mode, ParamGroup, ViTModel};

/// Optimisation settings shared by pretraining and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub augment: AugmentConfig,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            optimizer: AdamWConfig::default(),
            warmup_epochs: 10,
            min_lr: 0.0,
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optimizer.lr >= 0.0) || !(self.optimizer.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.optimizer.lr,
            min_lr: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
        }
    }
}

/// Pretext-specific settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextConfig {
    pub buffer: usize,
    pub flags: PretextFlags,
    pub loss_reduction: LossReduction,
    pub held_out_fraction: f64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            buffer: 1,
            flags: PretextFlags::default(),
            loss_reduction: LossReduction::Mean,
            held_out_fraction: 0.05,
        }
    }
}

impl PretextConfig {
    pub fn grid(&self, h: usize, w: usize, p: usize) -> Result<BufferedGrid> {
        self.flags.grid(h, w, p, self.buffer)
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,phase,loss,top1,top5,lr";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6},{:.6e}", r.epoch, r.phase, r.loss, r.top1, r.top5, r.lr);
    }
    out
}

/// Where and how often to write checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPlan {
    pub dir: Option<PathBuf>,
    pub every: usize,
}

impl CheckpointPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn into_dir(dir: &Path, every: usize) -> Self {
        Self {
            dir: Some(dir.to_path_buf()),
            every,
        }
    }

    fn maybe_save<T: Scalar>(&self, prefix: &str, model: &ViTModel<T>, opt: &AdamW<T>, epoch: usize, last: bool) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        if last {
            save_checkpoint(model, Some(opt), epoch as u64, &dir.join(format!("{prefix}-final.prckpt")))?;
        }
        if self.every > 0 && epoch % self.every == 0 {
            save_checkpoint(model, Some(opt), epoch as u64, &dir.join(format!("{prefix}-epoch{epoch:04}.prckpt")))?;
        }
        Ok(())
    }
}

/// Normalised, optionally augmented `C×H×W` image.
fn prepared_image<T: Scalar>(ds: &Dataset, i: usize, aug: Option<(&AugmentConfig, SeededRng)>) -> Tensor<T> {
    let (c, h, w) = ds.shape();
    let px = match aug {
        Some((cfg, mut rng)) if !cfg.is_identity() => augment(ds.pixels(i), (c, h, w), cfg, &mut rng),
        _ => ds.pixels(i).to_vec(),
    };
    let hw = h * w;
    let data = px
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let ch = k / hw;
            T::lit(((v - ds.meta.channel_mean[ch]) / ds.meta.channel_std[ch]) as f64)
        })
        .collect();
    Tensor::new(&[c, h, w], data).expect("image shape")
}

fn stack<T: Scalar>(images: &[Tensor<T>]) -> Tensor<T> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images.first().map_or(&[][..], |t| t.shape()));
    let mut data = Vec::with_capacity(images.iter().map(Tensor::numel).sum());
    for t in images {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data).expect("uniform image shapes")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub rows: Vec<MetricsRow>,
    pub final_train_loss: f64,
    pub held_out: PretextCounts,
    /// Number of patch-rotation images constructed over the whole run.
    pub patch_samples_built: usize,
}

/// Pretext accuracy on `ds` with a fixed sampling stream.
pub fn evaluate_pretext<T: Scalar>(
    model: &ViTModel<T>,
    ds: &Dataset,
    grid: &BufferedGrid,
    pcfg: &PretextConfig,
    batch_size: usize,
    seed: u64,
) -> Result<(PretextCounts, f64, f64)> {
    let mut counts = PretextCounts::default();
    let (mut img_loss, mut patch_loss, mut batches) = (0.0, 0.0, 0usize);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for (bi, chunk) in idx.chunks(batch_size.max(1)).enumerate() {
        let images: Vec<Tensor<T>> = chunk.iter().map(|&i| prepared_image(ds, i, None)).collect();
        let rng = SeededRng::derive(seed, "pretext-heldout", 0, bi as u64);
        let batch = assemble_pretext_batch(&images, grid, &rng, &pcfg.flags)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.images, Mode::Pretrain, &mut ForwardCtx::eval())?;
        let loss = patchrot_loss(&mut g, out.cls_logits, out.patch_logits, &batch, LossReduction::Mean)?;
        img_loss += loss.image_term.map_or(0.0, |v| g.item(v).to_f64().unwrap());
        patch_loss += loss.patch_term.map_or(0.0, |v| g.item(v).to_f64().unwrap());
        batches += 1;
        let cls = g.tensor(out.cls_logits);
        let patches = out.patch_logits.map(|v| g.tensor(v));
        counts.merge(pretext_counts(&cls, patches.as_ref(), &batch));
    }
    let n = batches.max(1) as f64;
    Ok((counts, img_loss / n, patch_loss / n))
}

/// Minimises the pretext loss on `train` (minus a held-out split used for
/// per-epoch pretext accuracy).
pub fn pretrain<T: Scalar>(
    model: &mut ViTModel<T>,
    train: &Dataset,
    cfg: &TrainConfig,
    pcfg: &PretextConfig,
    seed: u64,
    ckpt: &CheckpointPlan,
) -> Result<PretrainReport> {
    cfg.validate()?;
    pcfg.flags.validate()?;
    let (_, h, w) = train.shape();
    let grid = pcfg.grid(h, w, model.config.patch_size)?;
    if model.grid() != grid.patch_grid() {
        return Err(Error::Config(format!(
            "model grid {:?} does not match pretext grid {:?}",
            model.grid(),
            grid.patch_grid()
        )));
    }
    if !model.has_patch_heads() {
        return Err(Error::Config("pretraining needs a model with patch heads".into()));
    }
    let (fit, held) = train.split(pcfg.held_out_fraction, seed);
    if fit.is_empty() {
        return Err(Error::Config("no training images left after the held-out split".into()));
    }
    let aug = AugmentConfig {
        allow_zero_padding: false,
        ..cfg.augment
    };
    let schedule = cfg.schedule();
    let mut opt = AdamW::from_config(&cfg.optimizer);
    let steps_per_epoch = fit.len().div_ceil(cfg.batch_size);
    let mut rows = Vec::new();
    let mut step = 0;
    let mut patch_samples_built = 0;
    let mut final_train_loss = f64::NAN;
    let mut held_counts = PretextCounts::default();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..fit.len()).collect();
        SeededRng::derive(seed, "pretrain-order", epoch as u64, 0).shuffle(&mut order);
        let (mut loss_sum, mut counts) = (0.0, PretextCounts::default());
        let mut lr = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<Tensor<T>> = chunk
                .iter()
                .map(|&i| {
                    let rng = SeededRng::derive(seed, "pretrain-augment", epoch as u64, i as u64);
                    prepared_image(&fit, i, Some((&aug, rng)))
                })
                .collect();
            let rng = SeededRng::derive(seed, "pretext", epoch as u64, bi as u64);
            let batch = assemble_pretext_batch(&images, &grid, &rng, &pcfg.flags)?;
            patch_samples_built += batch.patch_rows.len();
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::train(SeededRng::derive(seed, "pretrain-dropout", epoch as u64, bi as u64));
            let out = model.forward(&mut g, &batch.images, Mode::Pretrain, &mut ctx)?;
            let loss = patchrot_loss(&mut g, out.cls_logits, out.patch_logits, &batch, pcfg.loss_reduction)?;
            let value = g.item(loss.total).to_f64().unwrap();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("pretrain loss at epoch {epoch}, batch {bi}")));
            }
            loss_sum += value;
            counts.merge(pretext_counts(
                &g.tensor(out.cls_logits),
                out.patch_logits.map(|v| g.tensor(v)).as_ref(),
                &batch,
            ));
            g.backward(loss.total)?;
            lr = schedule.lr_at(step, steps_per_epoch);
            opt.lr = lr;
            super::adamw_step(model, &g, &mut opt)?;
            step += 1;
        }
        final_train_loss = loss_sum / steps_per_epoch as f64;
        rows.push(MetricsRow {
            epoch,
            phase: "pretrain".into(),
            loss: final_train_loss,
            top1: counts.image_accuracy(),
            top5: counts.patch_accuracy(),
            lr,
        });
        if !held.is_empty() {
            let (hc, il, pl) = evaluate_pretext(model, &held, &grid, pcfg, cfg.batch_size, seed)?;
            held_counts = hc;
            if hc.image_total > 0 {
                rows.push(MetricsRow {
                    epoch,
                    phase: "heldout_imagerot".into(),
                    loss: il,
                    top1: hc.image_accuracy(),
                    top5: 1.0,
                    lr,
                });
            }
            if hc.patch_total > 0 {
                rows.push(MetricsRow {
                    epoch,
                    phase: "heldout_patchrot".into(),
                    loss: pl,
                    top1: hc.patch_accuracy(),
                    top5: 1.0,
                    lr,
                });
            }
        }
        ckpt.maybe_save("pretrain", model, &opt, epoch, epoch == cfg.epochs)?;
    }
    Ok(PretrainReport {
        rows,
        final_train_loss,
        held_out: held_counts,
        patch_samples_built,
    })
}

/// Turns a pretrained model into a downstream classifier: drops the patch
/// heads, resamples positions onto the full grid, replaces the last head
/// layer and applies `freeze`.
pub fn prepare_for_finetune<T: Scalar>(model: &mut ViTModel<T>, n_classes: usize, freeze: FreezeSpec, rng: &mut SeededRng) -> Result<()> {
    model.replace_head(n_classes, rng)?;
    model.config.n_downstream_classes = n_classes;
    let full = model.config.full_grid();
    model.set_grid(full)?;
    apply_freeze(model, freeze)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedReport {
    pub rows: Vec<MetricsRow>,
    pub final_top1: f64,
    pub final_top5: f64,
}

/// Eval-mode `(loss, top1, top5)` of a downstream model.
pub fn evaluate_classifier<T: Scalar>(model: &ViTModel<T>, ds: &Dataset, batch_size: usize) -> Result<(f64, f64, f64)> {
    let (mut loss, mut c1, mut c5) = (0.0, 0.0, 0.0);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = ds.batch_tensor::<T>(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.label(i)).collect();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, Mode::Downstream, &mut ForwardCtx::eval())?;
        let l = softmax_cross_entropy(&mut g, out.cls_logits, &labels)?;
        let n = chunk.len() as f64;
        loss += g.item(l).to_f64().unwrap() * n;
        let logits = g.tensor(out.cls_logits);
        c1 += topk_accuracy(&logits, &labels, 1)? * n;
        c5 += topk_accuracy(&logits, &labels, 5)? * n;
    }
    let n = ds.len().max(1) as f64;
    Ok((loss / n, c1 / n, c5 / n))
}

/// Whether only the output layer of `M0` is trainable (linear probing).
fn is_linear_probe<T: Scalar>(model: &ViTModel<T>) -> bool {
    model
        .parameters()
        .iter()
        .all(|p| p.trainable == (ParamGroup::of(&p.name) == ParamGroup::HeadOutput))
}

/// Hidden activations of `M0` (after its first layer) in eval mode.
pub fn head_features<T: Scalar>(model: &ViTModel<T>, ds: &Dataset, batch_size: usize) -> Result<Tensor<T>> {
    let hid = model.head.fc1.d_out();
    let mut data = Vec::with_capacity(ds.len() * hid);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = ds.batch_tensor::<T>(chunk);
        let mut g = Graph::new();
        let e = model.encode(&mut g, &x, &mut ForwardCtx::eval())?;
        let cls = g.slice(e, 1, 0, 1)?;
        let cls = g.reshape(cls, &[chunk.len(), model.config.embed_dim])?;
        let h = model.head.fc1.forward(&mut g, cls)?;
        let h = g.gelu(h)?;
        data.extend_from_slice(g.value(h));
    }
    Tensor::new(&[ds.len(), hid], data)
}

/// Supervised cross-entropy training of a downstream model, evaluating on
/// `test` after every epoch.
///
/// When only the head's output layer is trainable the frozen network is a
/// fixed feature extractor, so its eval-mode features are computed once and
/// the output layer is trained on them directly (no augmentation).
pub fn train_supervised<T: Scalar>(
    model: &mut ViTModel<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    ckpt: &CheckpointPlan,
) -> Result<SupervisedReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if train.meta.n_classes != model.head_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the head predicts {}",
            train.meta.n_classes,
            model.head_classes()
        )));
    }
    let probe = is_linear_probe(model);
    let (train_feats, test_feats) = if probe {
        (
            Some(head_features(model, train, 256)?),
            Some(head_features(model, test, 256)?),
        )
    } else {
        (None, None)
    };
    let schedule = cfg.schedule();
    let mut opt = AdamW::from_config(&cfg.optimizer);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut rows = Vec::new();
    let mut step = 0;
    let (mut final_top1, mut final_top5) = (0.0, 0.0);
    if cfg.epochs == 0 && !test.is_empty() {
        // Nothing to train: report the untouched model.
        let (_, top1, top5) = match &test_feats {
            Some(f) => probe_eval(model, f, test.labels())?,
            None => evaluate_classifier(model, test, 256)?,
        };
        final_top1 = top1;
        final_top5 = top5;
    }
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        SeededRng::derive(seed, "finetune-order", epoch as u64, 0).shuffle(&mut order);
        let (mut loss_sum, mut c1, mut c5) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.label(i)).collect();
            let mut g = Graph::new();
            let logits = if let Some(f) = &train_feats {
                let hid = f.shape()[1];
                let mut rows_data = Vec::with_capacity(chunk.len() * hid);
                for &i in chunk {
                    rows_data.extend_from_slice(f.row(i));
                }
                let x = g.constant(&[chunk.len(), hid], rows_data)?;
                model.head.fc2.forward(&mut g, x)?
            } else {
                let images: Vec<Tensor<T>> = chunk
                    .iter()
                    .map(|&i| {
                        let rng = SeededRng::derive(seed, "finetune-augment", epoch as u64, i as u64);
                        prepared_image(train, i, Some((&cfg.augment, rng)))
                    })
                    .collect();
                let mut ctx = ForwardCtx::train(SeededRng::derive(seed, "finetune-dropout", epoch as u64, bi as u64));
                model.forward(&mut g, &stack(&images), Mode::Downstream, &mut ctx)?.cls_logits
            };
            let loss = softmax_cross_entropy(&mut g, logits, &labels)?;
            let value = g.item(loss).to_f64().unwrap();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {bi}")));
            }
            loss_sum += value;
            let scored = g.tensor(logits);
            c1 += topk_accuracy(&scored, &labels, 1)? * chunk.len() as f64;
            c5 += topk_accuracy(&scored, &labels, 5)? * chunk.len() as f64;
            g.backward(loss)?;
            lr = schedule.lr_at(step, steps_per_epoch);
            opt.lr = lr;
            super::adamw_step(model, &g, &mut opt)?;
            step += 1;
        }
        rows.push(MetricsRow {
            epoch,
            phase: "train".into(),
            loss: loss_sum / steps_per_epoch as f64,
            top1: c1 / train.len() as f64,
            top5: c5 / train.len() as f64,
            lr,
        });
        if !test.is_empty() {
            let (loss, top1, top5) = match &test_feats {
                Some(f) => probe_eval(model, f, test.labels())?,
                None => evaluate_classifier(model, test, 256)?,
            };
            final_top1 = top1;
            final_top5 = top5;
            rows.push(MetricsRow {
                epoch,
                phase: "test".into(),
                loss,
                top1,
                top5,
                lr,
            });
        }
        ckpt.maybe_save("finetune", model, &opt, epoch, epoch == cfg.epochs)?;
    }
    Ok(SupervisedReport {
        rows,
        final_top1,
        final_top5,
    })
}

fn probe_eval<T: Scalar>(model: &ViTModel<T>, feats: &Tensor<T>, labels: &[usize]) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let x = g.leaf(feats);
    let logits = model.head.fc2.forward(&mut g, x)?;
    let loss = softmax_cross_entropy(&mut g, logits, labels)?;
    let t = g.tensor(logits);
    Ok((
        g.item(loss).to_f64().unwrap(),
        topk_accuracy(&t, labels, 1)?,
        topk_accuracy(&t, labels, 5)?,
    ))
}
