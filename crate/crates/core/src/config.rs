//! Run configuration: one JSON document with a dataset, model, pretext,
//! optimiser and harness section. Unknown keys are rejected; the hash of
//! the canonical serialisation names the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic_oriented, load_cifar_binary, load_idx, load_raw_archive, Dataset};
use crate::error::{Error, Result};
use crate::eval::{AttnMethod, Experiment};
use crate::optim::{PretextConfig, TrainConfig};
use crate::vit::{FreezeSpec, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
    Idx,
    Primg,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            "idx" => Ok(DatasetKind::Idx),
            "primg" => Ok(DatasetKind::Primg),
            other => Err(Error::Config(format!(
                "unknown dataset kind `{other}` (synthetic, cifar10, cifar100, idx, primg)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// CIFAR batch files, `[images, labels]` for IDX, or one PRIMG1 archive.
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    /// Keep only the first `max_train` training images.
    pub max_train: Option<usize>,
    /// Synthetic only: sizes, side length and generator seed.
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            train: Vec::new(),
            test: Vec::new(),
            max_train: None,
            n_train: 2000,
            n_test: 500,
            image_size: 32,
            seed: 0,
        }
    }
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut iter = parts.into_iter();
    let first = iter.next().ok_or_else(|| Error::Config("dataset needs at least one file".into()))?;
    let (shape, k, name) = (first.shape(), first.meta.n_classes, first.meta.name.clone());
    let mut images = first.all_pixels().to_vec();
    let mut labels = first.labels().to_vec();
    for d in iter {
        if d.shape() != shape {
            return Err(Error::DataFormat {
                path: PathBuf::from(&d.meta.name),
                detail: format!("shape {:?} differs from {shape:?}", d.shape()),
            });
        }
        images.extend_from_slice(d.all_pixels());
        labels.extend_from_slice(d.labels());
    }
    Dataset::new(&name, shape, k, images, labels)
}

impl DatasetConfig {
    fn load_split(&self, paths: &[PathBuf]) -> Result<Dataset> {
        for p in paths {
            if !p.exists() {
                return Err(Error::DataFormat {
                    path: p.clone(),
                    detail: "file not found".into(),
                });
            }
        }
        match self.kind {
            DatasetKind::Synthetic => unreachable!("synthetic data is generated"),
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
                let k = if self.kind == DatasetKind::Cifar10 { 10 } else { 100 };
                concat(paths.iter().map(|p| load_cifar_binary(p, k)).collect::<Result<_>>()?)
            }
            DatasetKind::Idx => match paths {
                [images, labels] => load_idx(images, labels),
                _ => Err(Error::Config("idx datasets need [images, labels] paths".into())),
            },
            DatasetKind::Primg => concat(paths.iter().map(|p| load_raw_archive(p)).collect::<Result<_>>()?),
        }
    }

    /// `(train, test)` splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, test) = if self.kind == DatasetKind::Synthetic {
            let all = gen_synthetic_oriented(self.n_train + self.n_test, self.image_size, self.image_size, self.seed)?;
            let tr: Vec<usize> = (0..self.n_train).collect();
            let te: Vec<usize> = (self.n_train..self.n_train + self.n_test).collect();
            (all.subset(&tr), all.subset(&te))
        } else {
            if self.train.is_empty() {
                return Err(Error::Config("dataset.train lists no files".into()));
            }
            let train = self.load_split(&self.train)?;
            let test = if self.test.is_empty() {
                train.subset(&[])
            } else {
                self.load_split(&self.test)?
            };
            (train, test)
        };
        if let Some(m) = self.max_train {
            if m < train.len() {
                train = train.subset(&(0..m).collect::<Vec<_>>());
            }
        }
        // Both splits are normalised with training statistics.
        train.compute_channel_stats();
        let mut test = test;
        test.meta.channel_mean = train.meta.channel_mean.clone();
        test.meta.channel_std = train.meta.channel_std.clone();
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    /// Comma-separated freeze modes; empty means the full sweep.
    pub freeze: String,
    pub label_counts: Vec<usize>,
    pub pretrain_epochs: Vec<usize>,
    /// Ablation variants; empty means all six.
    pub variants: Vec<String>,
    /// Transfer initialisations: `patchrot`, `supervised`.
    pub transfer_init: Vec<String>,
    pub attn: AttnMethod,
    /// Attention maps exported after fine-tuning.
    pub attn_images: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            freeze: String::new(),
            label_counts: vec![40, 400, 4000],
            pretrain_epochs: vec![50, 100, 150, 200, 250, 300, 350, 400],
            variants: Vec::new(),
            transfer_init: vec!["patchrot".into(), "supervised".into()],
            attn: AttnMethod::Last,
            attn_images: 4,
        }
    }
}

impl HarnessConfig {
    pub fn freeze_specs(&self, n_blocks: usize) -> Result<Vec<FreezeSpec>> {
        if self.freeze.trim().is_empty() {
            return Ok(FreezeSpec::sweep(n_blocks));
        }
        let specs = FreezeSpec::parse_list(&self.freeze).map_err(|e| Error::Config(e.to_string()))?;
        for s in &specs {
            if let FreezeSpec::Block(k) = s {
                if *k > n_blocks {
                    return Err(Error::Config(format!("freeze mode {s} but the model has {n_blocks} blocks")));
                }
            }
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    /// Target dataset of the transfer harness.
    pub transfer_target: Option<DatasetConfig>,
    pub model: ViTConfig,
    pub pretext: PretextConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub harness: HarnessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pretrain = TrainConfig::default();
        let finetune = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            transfer_target: None,
            model: ViTConfig::default(),
            pretext: PretextConfig::default(),
            pretrain,
            finetune,
            harness: HarnessConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.pretext.flags.validate()?;
        if !(0.0..1.0).contains(&self.pretext.held_out_fraction) {
            return Err(Error::Config("held_out_fraction must lie in [0, 1)".into()));
        }
        self.harness.freeze_specs(self.model.n_blocks)?;
        Ok(())
    }

    /// Canonical serialisation: compact JSON in declaration order, with the
    /// output directory excluded so the hash names the experiment only.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        serde_json::to_string(&c).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.short_hash())
    }

    /// The experiment description the harnesses consume.
    pub fn experiment(&self) -> Experiment {
        Experiment {
            model: self.model.clone(),
            pretext: self.pretext.clone(),
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            seed: self.seed,
            config_hash: self.short_hash(),
        }
    }

    /// Copies the dataset's image geometry and class count into the model.
    pub fn fit_model_to(&mut self, ds: &Dataset) {
        let (c, h, w) = ds.shape();
        self.model.image_c = c;
        self.model.image_h = h;
        self.model.image_w = w;
        self.model.n_downstream_classes = ds.meta.n_classes;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.pretrain.optimizer.lr, 5e-4);
        assert_eq!(c.pretrain.optimizer.weight_decay, 3e-2);
        assert_eq!((c.pretrain.batch_size, c.pretrain.warmup_epochs), (128, 10));
        assert_eq!((c.pretrain.epochs, c.finetune.epochs), (300, 200));
        assert_eq!(c.pretext.buffer, c.model.patch_size / 4);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1}"#).is_ok());
        let err = RunConfig::from_json(r#"{"seeed": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(RunConfig::from_json(r#"{"model": {"patch": 4}}"#).is_err());
    }

    #[test]
    fn hash_is_canonical() {
        let a = RunConfig::default();
        let mut b = RunConfig::from_json(&a.pretty()).unwrap();
        assert_eq!(a.hash(), b.hash());
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.short_hash().len(), 16);
    }

    #[test]
    fn freeze_list_parsing() {
        let mut h = HarnessConfig::default();
        assert_eq!(h.freeze_specs(7).unwrap().len(), 10);
        h.freeze = "NF,EB3,MLP".into();
        assert_eq!(h.freeze_specs(7).unwrap().len(), 3);
        h.freeze = "EB9".into();
        assert!(h.freeze_specs(7).is_err());
    }

    #[test]
    fn missing_files_are_data_errors() {
        let cfg = DatasetConfig {
            kind: DatasetKind::Cifar10,
            train: vec![PathBuf::from("/nonexistent/data_batch_1.bin")],
            ..DatasetConfig::default()
        };
        let err = cfg.load().unwrap_err();
        assert!(matches!(err, Error::DataFormat { .. }));
        assert!(err.to_string().contains("/nonexistent/data_batch_1.bin"));
    }
}
