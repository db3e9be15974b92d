//! Evaluation harnesses: freeze sweeps, pretraining-length sweeps,
//! label-scarce fine-tuning, cross-dataset transfer and pretext ablations.
//! Every report is a CSV whose rows carry the seed and config hash.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::optim::{
    prepare_for_finetune, pretrain, train_supervised, CheckpointPlan, PretextConfig, PretrainReport, SupervisedReport, TrainConfig,
};
use crate::scalar::Scalar;
use crate::tensor::SeededRng;
use crate::vit::{FreezeSpec, ViTConfig, ViTModel};

/// Everything a harness needs besides the data.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: ViTConfig,
    pub pretext: PretextConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub seed: u64,
    pub config_hash: String,
}

impl Experiment {
    fn fitted(&self, ds: &Dataset) -> ViTConfig {
        let (c, h, w) = ds.shape();
        ViTConfig {
            image_c: c,
            image_h: h,
            image_w: w,
            n_downstream_classes: ds.meta.n_classes,
            ..self.model.clone()
        }
    }

    /// Freshly initialised pretext model for images shaped like `train`.
    pub fn pretext_model<T: Scalar>(&self, train: &Dataset) -> Result<ViTModel<T>> {
        let cfg = self.fitted(train);
        let grid = self.pretext.grid(cfg.image_h, cfg.image_w, cfg.patch_size)?;
        ViTModel::for_pretraining(&cfg, grid.patch_grid(), &mut SeededRng::derive(self.seed, "pretrain-init", 0, 0))
    }

    /// Pretrains a fresh model on `train` for `epochs` epochs.
    pub fn pretrain_fresh<T: Scalar>(&self, train: &Dataset, epochs: usize, ckpt: &CheckpointPlan) -> Result<(ViTModel<T>, PretrainReport)> {
        let mut model = self.pretext_model(train)?;
        let cfg = TrainConfig {
            epochs,
            ..self.pretrain.clone()
        };
        let report = pretrain(&mut model, train, &cfg, &self.pretext, self.seed, ckpt)?;
        Ok((model, report))
    }

    /// Untrained downstream classifier; the random-init baseline.
    pub fn random_classifier<T: Scalar>(&self, train: &Dataset) -> Result<ViTModel<T>> {
        ViTModel::for_classification(&self.fitted(train), &mut SeededRng::derive(self.seed, "random-init", 0, 0))
    }

    /// A copy of `base` ready for fine-tuning on `train` under `freeze`:
    /// patch heads dropped, positions resampled, a new output layer drawn
    /// from the same stream for every freeze mode.
    pub fn prepare_copy<T: Scalar>(&self, base: &ViTModel<T>, train: &Dataset, freeze: FreezeSpec) -> Result<ViTModel<T>> {
        let mut model = base.clone();
        let (c, h, w) = train.shape();
        if model.config.image_c != c {
            return Err(Error::Config(format!(
                "model expects {} channels but the dataset has {c}",
                model.config.image_c
            )));
        }
        model.config.image_h = h;
        model.config.image_w = w;
        model.config.validate()?;
        prepare_for_finetune(
            &mut model,
            train.meta.n_classes,
            freeze,
            &mut SeededRng::derive(self.seed, "head-init", 0, 0),
        )?;
        Ok(model)
    }

    /// Fine-tunes a copy of `base` on `train` under `freeze`.
    pub fn finetune_copy<T: Scalar>(
        &self,
        base: &ViTModel<T>,
        train: &Dataset,
        test: &Dataset,
        freeze: FreezeSpec,
        ckpt: &CheckpointPlan,
    ) -> Result<(ViTModel<T>, SupervisedReport)> {
        let mut model = self.prepare_copy(base, train, freeze)?;
        let report = train_supervised(&mut model, train, test, &self.finetune, self.seed, ckpt)?;
        Ok((model, report))
    }

    fn tail(&self) -> String {
        format!("{},{}", self.seed, self.config_hash)
    }
}

/// One fine-tuning outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub init: String,
    pub freeze: FreezeSpec,
    pub top1: f64,
    pub top5: f64,
}

pub const SWEEP_HEADER: &str = "init,freeze,top1,top5,seed,config_hash";

pub fn sweep_csv(rows: &[SweepRow], exp: &Experiment) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:.6},{}", r.init, r.freeze, r.top1, r.top5, exp.tail());
    }
    out
}

/// Fine-tunes `base` once per freeze mode.
pub fn run_freeze_sweep<T: Scalar>(
    exp: &Experiment,
    base: &ViTModel<T>,
    init: &str,
    train: &Dataset,
    test: &Dataset,
    specs: &[FreezeSpec],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(specs.len());
    for &freeze in specs {
        let (_, report) = exp.finetune_copy(base, train, test, freeze, &CheckpointPlan::none())?;
        rows.push(SweepRow {
            init: init.to_string(),
            freeze,
            top1: report.final_top1,
            top5: report.final_top5,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSweepRow {
    pub pretrain_epochs: usize,
    pub freeze: FreezeSpec,
    pub top1: f64,
    pub top5: f64,
    pub heldout_imagerot: f64,
    pub heldout_patchrot: f64,
}

pub const EPOCH_SWEEP_HEADER: &str = "pretrain_epochs,freeze,top1,top5,heldout_imagerot,heldout_patchrot,seed,config_hash";

pub fn epoch_sweep_csv(rows: &[EpochSweepRow], exp: &Experiment) -> String {
    let mut out = format!("{EPOCH_SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.pretrain_epochs,
            r.freeze,
            r.top1,
            r.top5,
            r.heldout_imagerot,
            r.heldout_patchrot,
            exp.tail()
        );
    }
    out
}

/// Separate pretraining runs for each epoch count (each with its own
/// schedule), each followed by a freeze sweep.
pub fn run_epoch_sweep<T: Scalar>(
    exp: &Experiment,
    train: &Dataset,
    test: &Dataset,
    epochs: &[usize],
    specs: &[FreezeSpec],
) -> Result<Vec<EpochSweepRow>> {
    let mut rows = Vec::new();
    for &e in epochs {
        let (model, report) = exp.pretrain_fresh::<T>(train, e, &CheckpointPlan::none())?;
        for r in run_freeze_sweep(exp, &model, "patchrot", train, test, specs)? {
            rows.push(EpochSweepRow {
                pretrain_epochs: e,
                freeze: r.freeze,
                top1: r.top1,
                top5: r.top5,
                heldout_imagerot: report.held_out.image_accuracy(),
                heldout_patchrot: report.held_out.patch_accuracy(),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiSupervisedRow {
    pub labels: usize,
    pub method: String,
    pub freeze: FreezeSpec,
    pub top1: f64,
    pub top5: f64,
}

pub const SEMISUP_HEADER: &str = "labels,method,freeze,top1,top5,seed,config_hash";

pub fn semisup_csv(rows: &[SemiSupervisedRow], exp: &Experiment) -> String {
    let mut out = format!("{SEMISUP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            r.labels,
            r.method,
            r.freeze,
            r.top1,
            r.top5,
            exp.tail()
        );
    }
    out
}

/// Pretrains once on all of `train` (labels unused), then fine-tunes on
/// class-balanced labelled subsets; a randomly initialised model trained on
/// the same subset is the supervised baseline.
pub fn run_semisupervised<T: Scalar>(
    exp: &Experiment,
    train: &Dataset,
    test: &Dataset,
    label_counts: &[usize],
    specs: &[FreezeSpec],
) -> Result<Vec<SemiSupervisedRow>> {
    let (pretrained, _) = exp.pretrain_fresh::<T>(train, exp.pretrain.epochs, &CheckpointPlan::none())?;
    let baseline = exp.random_classifier::<T>(train)?;
    let mut rows = Vec::new();
    for &count in label_counts {
        if count > train.len() {
            return Err(Error::Config(format!(
                "{count} labelled images requested but the training set has {}",
                train.len()
            )));
        }
        let subset = train.stratified_subset(count, exp.seed)?;
        for r in run_freeze_sweep(exp, &pretrained, "patchrot", &subset, test, specs)? {
            rows.push(SemiSupervisedRow {
                labels: count,
                method: "patchrot".into(),
                freeze: r.freeze,
                top1: r.top1,
                top5: r.top5,
            });
        }
        let (_, report) = exp.finetune_copy(&baseline, &subset, test, FreezeSpec::NoFreeze, &CheckpointPlan::none())?;
        rows.push(SemiSupervisedRow {
            labels: count,
            method: "supervised".into(),
            freeze: FreezeSpec::NoFreeze,
            top1: report.final_top1,
            top5: report.final_top5,
        });
    }
    Ok(rows)
}

/// How the transferred backbone was obtained on the source dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferInit {
    /// Pretext pretraining.
    PatchRot,
    /// Supervised training on the source labels.
    Supervised,
}

impl std::str::FromStr for TransferInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "patchrot" => Ok(TransferInit::PatchRot),
            "supervised" => Ok(TransferInit::Supervised),
            _ => Err(Error::Config(format!("unknown transfer init `{s}`"))),
        }
    }
}

impl std::fmt::Display for TransferInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransferInit::PatchRot => "patchrot",
            TransferInit::Supervised => "supervised",
        })
    }
}

/// Trains on `source`, then runs a freeze sweep on the target dataset.
pub fn run_transfer<T: Scalar>(
    exp: &Experiment,
    source: &Dataset,
    target_train: &Dataset,
    target_test: &Dataset,
    inits: &[TransferInit],
    specs: &[FreezeSpec],
) -> Result<Vec<SweepRow>> {
    if source.shape().0 != target_train.shape().0 {
        return Err(Error::Config(format!(
            "source has {} channels but the target has {}",
            source.shape().0,
            target_train.shape().0
        )));
    }
    let mut rows = Vec::new();
    for &init in inits {
        let base = match init {
            TransferInit::PatchRot => exp.pretrain_fresh::<T>(source, exp.pretrain.epochs, &CheckpointPlan::none())?.0,
            TransferInit::Supervised => {
                let mut m = exp.random_classifier::<T>(source)?;
                let no_test = source.subset(&[]);
                train_supervised(&mut m, source, &no_test, &exp.finetune, exp.seed, &CheckpointPlan::none())?;
                m
            }
        };
        rows.extend(run_freeze_sweep(exp, &base, &init.to_string(), target_train, target_test, specs)?);
    }
    Ok(rows)
}

/// Pretext variants compared by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoImageRot,
    NoPatchRot,
    OriginalSize,
    RotateImgAndPatch,
    ReuseMlpHead,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoImageRot,
        Ablation::NoPatchRot,
        Ablation::OriginalSize,
        Ablation::RotateImgAndPatch,
        Ablation::ReuseMlpHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoImageRot => "no_imagerot",
            Ablation::NoPatchRot => "no_patchrot",
            Ablation::OriginalSize => "original_size",
            Ablation::RotateImgAndPatch => "rotate_img_and_patch",
            Ablation::ReuseMlpHead => "reuse_mlp_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
    }

    /// Applies the variant on top of the base settings.
    pub fn configure(self, exp: &Experiment) -> Experiment {
        let mut e = exp.clone();
        let f = &mut e.pretext.flags;
        match self {
            Ablation::Full => {}
            Ablation::NoImageRot => f.no_image_rot = true,
            Ablation::NoPatchRot => f.no_patch_rot = true,
            Ablation::OriginalSize => f.original_size = true,
            Ablation::RotateImgAndPatch => f.rotate_img_and_patch = true,
            Ablation::ReuseMlpHead => {
                e.model.reuse_m0_head = true;
                e.model.share_patch_heads = false;
            }
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Ablation,
    pub results: Vec<(FreezeSpec, f64)>,
    pub patch_samples_built: usize,
    pub patch_head_params: usize,
}

/// Wide layout: one row per variant, one top-1 column per freeze mode.
pub fn ablation_csv(rows: &[AblationRow], specs: &[FreezeSpec], exp: &Experiment) -> String {
    let cols: Vec<String> = specs.iter().map(ToString::to_string).collect();
    let mut out = format!("variant,{},patch_samples_built,patch_head_params,seed,config_hash\n", cols.join(","));
    for r in rows {
        let vals: Vec<String> = r.results.iter().map(|(_, v)| format!("{v:.6}")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.variant.name(),
            vals.join(","),
            r.patch_samples_built,
            r.patch_head_params,
            exp.tail()
        );
    }
    out
}

fn patch_head_params<T: Scalar>(model: &ViTModel<T>) -> usize {
    model
        .parameters()
        .iter()
        .filter(|p| p.name.starts_with("patch_heads"))
        .map(|p| p.tensor.numel())
        .sum()
}

pub fn run_ablations<T: Scalar>(
    exp: &Experiment,
    train: &Dataset,
    test: &Dataset,
    variants: &[Ablation],
    specs: &[FreezeSpec],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        let e = variant.configure(exp);
        let (model, report) = e.pretrain_fresh::<T>(train, e.pretrain.epochs, &CheckpointPlan::none())?;
        let params = patch_head_params(&model);
        let results = run_freeze_sweep(&e, &model, variant.name(), train, test, specs)?
            .into_iter()
            .map(|r| (r.freeze, r.top1))
            .collect();
        rows.push(AblationRow {
            variant,
            results,
            patch_samples_built: report.patch_samples_built,
            patch_head_params: params,
        });
    }
    Ok(rows)
}
