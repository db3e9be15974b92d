use std::path::Path;
use std::time::Instant;

use patchrot::config::{DatasetConfig, DatasetKind, RunConfig};
use patchrot::data::{write_raw_archive, Dataset};
use patchrot::eval::{
    ablation_csv, attention_map, epoch_sweep_csv, run_ablations, run_epoch_sweep, run_freeze_sweep, run_semisupervised, run_transfer,
    semisup_csv, sweep_csv, Ablation, Experiment, SweepRow, TransferInit,
};
use patchrot::optim::{diff_checkpoints, load_checkpoint, pretrain, save_checkpoint, train_supervised, CheckpointPlan};
use patchrot::selftest::run_selftest;
use patchrot::vit::{FreezeSpec, ViTModel};
use patchrot::{Error, Result};

use crate::args::{Cli, Command, ConvertArgs, RunArgs, SelftestArgs};
use crate::rundir::RunDir;

pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Finetune(a) => cmd_finetune(&a, false),
        Command::Probe(a) => cmd_finetune(&a, true),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Semisup(a) => cmd_semisup(&a),
        Command::Transfer(a) => cmd_transfer(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Convert(a) => cmd_convert(&a),
        Command::Selftest(a) => cmd_selftest(&a),
        Command::Diff { a, b } => cmd_diff(&a, &b),
    }
}

fn parse_list<T>(s: &str, what: &str) -> Result<Vec<T>>
where
    T: std::str::FromStr,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Config(format!("bad {what} `{t}`"))))
        .collect()
}

/// Which training phases `--epochs` applies to.
#[derive(Clone, Copy, PartialEq)]
enum Phases {
    Pretrain,
    Finetune,
    Both,
}

/// Defaults, then the config file, then flags.
fn resolve(args: &RunArgs, phases: Phases) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(e) = args.epochs {
        if phases != Phases::Finetune {
            cfg.pretrain.epochs = e;
        }
        if phases != Phases::Pretrain {
            cfg.finetune.epochs = e;
        }
    }
    if let Some(e) = args.pretrain_epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(e) = args.finetune_epochs {
        cfg.finetune.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    if let Some(kind) = &args.dataset {
        cfg.dataset.kind = kind.parse()?;
    }
    if !args.train_files.is_empty() {
        cfg.dataset.train = args.train_files.clone();
    }
    if !args.test_files.is_empty() {
        cfg.dataset.test = args.test_files.clone();
    }
    if let Some(m) = args.max_train {
        cfg.dataset.max_train = Some(m);
    }
    if let Some(p) = args.patch {
        cfg.model.patch_size = p;
        cfg.pretext.buffer = p / 4;
    }
    if let Some(b) = args.buffer {
        cfg.pretext.buffer = b;
    }
    if let Some(lr) = args.lr {
        cfg.pretrain.optimizer.lr = lr;
        cfg.finetune.optimizer.lr = lr;
    }
    if let Some(bs) = args.batch_size {
        cfg.pretrain.batch_size = bs;
        cfg.finetune.batch_size = bs;
    }
    if let Some(f) = &args.freeze {
        cfg.harness.freeze = f.clone();
    }
    if let Some(l) = &args.labels {
        cfg.harness.label_counts = parse_list(l, "label count")?;
    }
    if let Some(v) = &args.variants {
        cfg.harness.variants = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if let Some(a) = &args.attn {
        cfg.harness.attn = a.parse()?;
    }
    Ok(cfg)
}

/// Resolves the config, loads the data and fits the model section to it.
fn prepare(args: &RunArgs, phases: Phases) -> Result<(RunConfig, Dataset, Dataset)> {
    let mut cfg = resolve(args, phases)?;
    let (train, test) = cfg.dataset.load()?;
    cfg.fit_model_to(&train);
    cfg.validate()?;
    println!(
        "data: {} train / {} test images of {}x{}x{}, {} classes",
        train.len(),
        test.len(),
        cfg.model.image_c,
        cfg.model.image_h,
        cfg.model.image_w,
        train.meta.n_classes
    );
    Ok((cfg, train, test))
}

fn log_geometry(cfg: &RunConfig) -> Result<()> {
    let m = &cfg.model;
    let g = cfg.pretext.grid(m.image_h, m.image_w, m.patch_size)?;
    println!(
        "pretext geometry: {}x{} image, P={} B={} -> {}x{} pretext image, {} patches ({}x{})",
        m.image_h, m.image_w, g.p, g.b, g.h_pr, g.w_pr, g.n_pr, g.g_h, g.g_w
    );
    Ok(())
}

fn cmd_pretrain(args: &RunArgs) -> Result<u8> {
    let (cfg, train, _) = prepare(args, Phases::Pretrain)?;
    log_geometry(&cfg)?;
    let dir = RunDir::create("pretrain", &cfg)?;
    let exp = cfg.experiment();
    let mut model = exp.pretext_model::<f32>(&train)?;
    let plan = CheckpointPlan::into_dir(&dir.checkpoints(), cfg.pretrain.checkpoint_every);
    let report = pretrain(&mut model, &train, &cfg.pretrain, &cfg.pretext, cfg.seed, &plan)?;
    dir.write_metrics(&report.rows)?;
    let held = report.held_out;
    dir.report(
        "pretrain.csv",
        &format!(
            "epochs,final_train_loss,heldout_imagerot,heldout_patchrot,patch_samples_built,seed,config_hash\n{},{:.6},{:.6},{:.6},{},{},{}\n",
            cfg.pretrain.epochs,
            report.final_train_loss,
            held.image_accuracy(),
            held.patch_accuracy(),
            report.patch_samples_built,
            cfg.seed,
            cfg.short_hash()
        ),
    )?;
    if cfg.pretrain.epochs == 0 {
        println!("0 epochs: saved the untrained model");
    } else {
        println!(
            "pretrained {} epochs: loss {:.4}, held-out image rotation {:.1}%, patch rotation {:.1}%",
            cfg.pretrain.epochs,
            report.final_train_loss,
            100.0 * held.image_accuracy(),
            100.0 * held.patch_accuracy()
        );
    }
    println!("run directory: {}", dir.root.display());
    Ok(0)
}

/// Starting point of a fine-tuning command and its label in reports.
fn base_model(args: &RunArgs, exp: &Experiment, train: &Dataset) -> Result<Option<(ViTModel<f32>, String)>> {
    match (&args.checkpoint, args.init.as_deref()) {
        (Some(path), _) => {
            let ck = load_checkpoint::<f32>(path)?;
            println!("loaded {} (epoch {})", path.display(), ck.epoch);
            Ok(Some((ck.model, "checkpoint".into())))
        }
        (None, Some("random")) => Ok(Some((exp.random_classifier(train)?, "random".into()))),
        (None, Some(other)) => Err(Error::Config(format!("unknown init `{other}`; use --checkpoint PATH or --init random"))),
        (None, None) => Ok(None),
    }
}

fn export_attention(dir: &RunDir, cfg: &RunConfig, model: &ViTModel<f32>, test: &Dataset) -> Result<()> {
    let (c, h, w) = test.shape();
    for i in 0..cfg.harness.attn_images.min(test.len()) {
        let image = test.batch_tensor::<f32>(&[i]).reshape(&[c, h, w])?;
        attention_map(model, &image, cfg.harness.attn)?.write(&dir.attmaps(), &format!("test{i:04}"))?;
    }
    Ok(())
}

fn cmd_finetune(args: &RunArgs, probe: bool) -> Result<u8> {
    let (cfg, train, test) = prepare(args, Phases::Finetune)?;
    let exp = cfg.experiment();
    let freeze = if probe {
        FreezeSpec::Mlp
    } else if cfg.harness.freeze.trim().is_empty() {
        FreezeSpec::NoFreeze
    } else {
        match cfg.harness.freeze_specs(cfg.model.n_blocks)?[..] {
            [one] => one,
            _ => return Err(Error::Config("finetune takes one freeze mode; use `sweep` for several".into())),
        }
    };
    let command = if probe { "probe" } else { "finetune" };
    let (base, init) =
        base_model(args, &exp, &train)?.ok_or_else(|| Error::Config(format!("{command} needs --checkpoint PATH or --init random")))?;
    let dir = RunDir::create(command, &cfg)?;
    let mut model = exp.prepare_copy(&base, &train, freeze)?;
    // The prepared starting point, so a diff against the final checkpoint
    // shows exactly what training touched.
    save_checkpoint(&model, None, 0, &dir.checkpoints().join("finetune-start.prckpt"))?;
    let plan = CheckpointPlan::into_dir(&dir.checkpoints(), cfg.finetune.checkpoint_every);
    let report = train_supervised(&mut model, &train, &test, &cfg.finetune, cfg.seed, &plan)?;
    dir.write_metrics(&report.rows)?;
    let row = SweepRow {
        init,
        freeze,
        top1: report.final_top1,
        top5: report.final_top5,
    };
    dir.report(&format!("{command}.csv"), &sweep_csv(&[row], &exp))?;
    export_attention(&dir, &cfg, &model, &test)?;
    println!(
        "{command} ({freeze}): top-1 {:.2}%, top-5 {:.2}%",
        100.0 * report.final_top1,
        100.0 * report.final_top5
    );
    println!("run directory: {}", dir.root.display());
    Ok(0)
}

fn cmd_sweep(args: &RunArgs) -> Result<u8> {
    let (cfg, train, test) = prepare(args, Phases::Both)?;
    let exp = cfg.experiment();
    if args.epoch_sweep {
        log_geometry(&cfg)?;
        let specs = cfg.harness.freeze_specs(cfg.model.n_blocks)?;
        let dir = RunDir::create("sweep", &cfg)?;
        let rows = run_epoch_sweep::<f32>(&exp, &train, &test, &cfg.harness.pretrain_epochs, &specs)?;
        dir.write_metrics(&[])?;
        dir.report("epoch_sweep.csv", &epoch_sweep_csv(&rows, &exp))?;
        return Ok(0);
    }
    let (base, init) = match base_model(args, &exp, &train)? {
        Some(b) => b,
        None => {
            log_geometry(&cfg)?;
            (exp.pretrain_fresh::<f32>(&train, cfg.pretrain.epochs, &CheckpointPlan::none())?.0, "patchrot".into())
        }
    };
    let specs = cfg.harness.freeze_specs(base.config.n_blocks)?;
    let dir = RunDir::create("sweep", &cfg)?;
    let rows = run_freeze_sweep(&exp, &base, &init, &train, &test, &specs)?;
    for r in &rows {
        println!("{:<4} top-1 {:.2}%", r.freeze.to_string(), 100.0 * r.top1);
    }
    dir.write_metrics(&[])?;
    dir.report("sweep.csv", &sweep_csv(&rows, &exp))?;
    Ok(0)
}

fn cmd_semisup(args: &RunArgs) -> Result<u8> {
    let (cfg, train, test) = prepare(args, Phases::Both)?;
    log_geometry(&cfg)?;
    let exp = cfg.experiment();
    let specs = cfg.harness.freeze_specs(cfg.model.n_blocks)?;
    let dir = RunDir::create("semisup", &cfg)?;
    let rows = run_semisupervised::<f32>(&exp, &train, &test, &cfg.harness.label_counts, &specs)?;
    dir.write_metrics(&[])?;
    dir.report("semisup.csv", &semisup_csv(&rows, &exp))?;
    Ok(0)
}

fn cmd_transfer(args: &RunArgs) -> Result<u8> {
    let mut cfg = resolve(args, Phases::Both)?;
    if let Some(list) = &args.init {
        cfg.harness.transfer_init = list.split(',').map(|s| s.trim().to_string()).collect();
    }
    let inits: Vec<TransferInit> = cfg.harness.transfer_init.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    let target = cfg
        .transfer_target
        .clone()
        .ok_or_else(|| Error::Config("transfer needs a `transfer_target` dataset section".into()))?;
    let (source, _) = cfg.dataset.load()?;
    let (target_train, target_test) = target.load()?;
    cfg.fit_model_to(&source);
    cfg.validate()?;
    log_geometry(&cfg)?;
    let exp = cfg.experiment();
    let specs = cfg.harness.freeze_specs(cfg.model.n_blocks)?;
    let dir = RunDir::create("transfer", &cfg)?;
    let rows = run_transfer::<f32>(&exp, &source, &target_train, &target_test, &inits, &specs)?;
    dir.write_metrics(&[])?;
    dir.report("transfer.csv", &sweep_csv(&rows, &exp))?;
    Ok(0)
}

fn cmd_ablate(args: &RunArgs) -> Result<u8> {
    let (cfg, train, test) = prepare(args, Phases::Both)?;
    let variants: Vec<Ablation> = if cfg.harness.variants.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        cfg.harness.variants.iter().map(|v| Ablation::parse(v)).collect::<Result<_>>()?
    };
    log_geometry(&cfg)?;
    let exp = cfg.experiment();
    let specs = cfg.harness.freeze_specs(cfg.model.n_blocks)?;
    let dir = RunDir::create("ablate", &cfg)?;
    let rows = run_ablations::<f32>(&exp, &train, &test, &variants, &specs)?;
    dir.write_metrics(&[])?;
    dir.report("ablation.csv", &ablation_csv(&rows, &specs, &exp))?;
    Ok(0)
}

fn cmd_convert(args: &ConvertArgs) -> Result<u8> {
    let kind: DatasetKind = args.kind.parse()?;
    if kind == DatasetKind::Synthetic {
        return Err(Error::Config("convert reads files; `synthetic` has none".into()));
    }
    let source = DatasetConfig {
        kind,
        train: args.inputs.clone(),
        ..DatasetConfig::default()
    };
    let (ds, _) = source.load()?;
    write_raw_archive(&ds, &args.out)?;
    let (c, h, w) = ds.shape();
    println!("wrote {}", args.out.display());
    println!("n={} shape={c}x{h}x{w} classes={}", ds.len(), ds.meta.n_classes);
    let hist: Vec<String> = ds.class_histogram().iter().map(ToString::to_string).collect();
    println!("class histogram: {}", hist.join(","));
    Ok(0)
}

fn cmd_selftest(args: &SelftestArgs) -> Result<u8> {
    let start = Instant::now();
    let lines = run_selftest(args.inject_fault.as_deref())?;
    for l in &lines {
        println!("{}  {:<36} {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
    eprintln!("selftest finished in {:.1}s", start.elapsed().as_secs_f64());
    if failed.is_empty() {
        println!("all {} checks passed", lines.len());
        Ok(0)
    } else {
        println!("{} of {} checks failed: {}", failed.len(), lines.len(), failed.join(", "));
        Ok(1)
    }
}

fn cmd_diff(a: &Path, b: &Path) -> Result<u8> {
    let diff = diff_checkpoints(a, b)?;
    if diff.is_empty() {
        println!("identical");
    }
    for (name, d) in diff {
        if d.is_finite() {
            println!("{name} {d:e}");
        } else {
            println!("{name} (only in one checkpoint or reshaped)");
        }
    }
    Ok(0)
}
