use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "patchrot", version, about = "Rotation-prediction pretraining for vision transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain on image and patch rotation prediction.
    Pretrain(RunArgs),
    /// Fine-tune a checkpoint (or a random init) under one freeze mode.
    Finetune(RunArgs),
    /// Linear probe: fine-tune with everything but the last layer frozen.
    Probe(RunArgs),
    /// Fine-tune once per freeze mode (NF, PE, EB1.., MLP).
    Sweep(RunArgs),
    /// Fine-tune on class-stratified labelled subsets.
    Semisup(RunArgs),
    /// Pretrain on the source dataset, fine-tune on the transfer target.
    Transfer(RunArgs),
    /// Compare pretext variants.
    Ablate(RunArgs),
    /// Convert CIFAR binary, IDX or PRIMG1 files into one PRIMG1 archive.
    Convert(ConvertArgs),
    /// Gradient checks, rotation and geometry oracles, loss at init.
    Selftest(SelftestArgs),
    /// List tensors that differ between two checkpoints.
    Diff { a: PathBuf, b: PathBuf },
}

/// Config file plus overrides shared by the training commands.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON config; defaults are used when omitted.
    pub config: Option<PathBuf>,

    /// Epochs of this command's training phase(s).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent of the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset kind: synthetic, cifar10, cifar100, idx, primg.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Training files (repeatable).
    #[arg(long = "train")]
    pub train_files: Vec<PathBuf>,
    /// Test files (repeatable).
    #[arg(long = "test")]
    pub test_files: Vec<PathBuf>,
    #[arg(long)]
    pub max_train: Option<usize>,
    /// Patch size; also sets B = P/4 unless --B is given.
    #[arg(long = "P")]
    pub patch: Option<usize>,
    /// Pretext buffer between patches.
    #[arg(long = "B")]
    pub buffer: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Freeze modes, comma-separated (e.g. NF,EB3,MLP).
    #[arg(long)]
    pub freeze: Option<String>,
    /// Labelled-subset sizes for semisup, comma-separated.
    #[arg(long)]
    pub labels: Option<String>,
    /// Ablation variants, comma-separated.
    #[arg(long)]
    pub variants: Option<String>,
    /// Initialisation: `random` for finetune/probe/sweep; a comma-separated
    /// list of `patchrot,supervised` for transfer.
    #[arg(long)]
    pub init: Option<String>,
    /// Starting checkpoint for finetune, probe and sweep.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sweep over the harness's pretraining epoch list.
    #[arg(long)]
    pub epoch_sweep: bool,
    /// Attention map method: last or rollout.
    #[arg(long)]
    pub attn: Option<String>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Source format: cifar10, cifar100, idx (images then labels) or primg.
    #[arg(long)]
    pub kind: String,
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Debug hook: perturb this op's backward pass.
    #[arg(long)]
    pub inject_fault: Option<String>,
}
