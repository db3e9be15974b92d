use std::fs;
use std::path::PathBuf;

use patchrot::optim::{
    adamw_step, diff_checkpoints, load_checkpoint, load_into, read_checkpoint, save_checkpoint, AdamW, CHECKPOINT_MAGIC,
};
use patchrot::nn::{softmax_cross_entropy, ForwardCtx, Module};
use patchrot::vit::{Mode, ViTConfig, ViTModel};
use patchrot::{Error, Graph, SeededRng, Tensor};

fn tiny() -> ViTConfig {
    ViTConfig {
        image_h: 16,
        image_w: 16,
        embed_dim: 8,
        n_blocks: 1,
        n_heads: 2,
        expansion: 16,
        n_downstream_classes: 3,
        ..ViTConfig::default()
    }
}

fn golden_model() -> ViTModel<f32> {
    ViTModel::for_pretraining(&tiny(), (3, 3), &mut SeededRng::new(2024, 0)).unwrap()
}

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.prckpt")
}

/// A model with one optimiser step applied, so AdamW moments are non-trivial.
fn stepped() -> (ViTModel<f64>, AdamW<f64>) {
    let mut model = ViTModel::<f64>::for_classification(&tiny(), &mut SeededRng::new(1, 0)).unwrap();
    let x: Tensor<f64> = SeededRng::new(1, 1).draw(patchrot::tensor::Distribution::UniformReal, &[2, 3, 16, 16]).unwrap();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &x, Mode::Downstream, &mut ForwardCtx::eval()).unwrap();
    let loss = softmax_cross_entropy(&mut g, out.cls_logits, &[0, 2]).unwrap();
    g.backward(loss).unwrap();
    let mut opt = AdamW::new(1e-3, 0.03);
    adamw_step(&mut model, &g, &mut opt).unwrap();
    (model, opt)
}

#[test]
fn round_trip_restores_model_and_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.prckpt");
    let (model, opt) = stepped();
    save_checkpoint(&model, Some(&opt), 7, &path).unwrap();
    let ck = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(ck.epoch, 7);
    assert_eq!(ck.model, model);
    let restored = ck.optimizer.unwrap();
    assert_eq!(restored.steps_taken(), 1);
    assert_eq!(restored.moments(), opt.moments());

    // Precision is converted on load.
    let narrow = load_checkpoint::<f32>(&path).unwrap();
    let a: Vec<f64> = model.parameters().iter().flat_map(|p| p.tensor.to_f64_vec()).collect();
    let b: Vec<f64> = narrow.model.parameters().iter().flat_map(|p| p.tensor.to_f64_vec()).collect();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(1.0)));

    // Loading into an identically shaped model.
    let mut other = ViTModel::<f64>::for_classification(&tiny(), &mut SeededRng::new(99, 0)).unwrap();
    assert_ne!(other, model);
    assert_eq!(load_into(&mut other, &path).unwrap(), 7);
    assert_eq!(other, model);
}

#[test]
fn truncated_or_corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.prckpt");
    save_checkpoint(&stepped().0, None, 1, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert!(bytes.starts_with(CHECKPOINT_MAGIC));

    for cut in [3, CHECKPOINT_MAGIC.len() + 2, bytes.len() / 2, bytes.len() - 1] {
        let bad = dir.path().join(format!("cut{cut}.prckpt"));
        fs::write(&bad, &bytes[..cut]).unwrap();
        let err = read_checkpoint::<f64>(&bad).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "cut at {cut}: {err}");
    }

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    let bad = dir.path().join("flip.prckpt");
    fs::write(&bad, &flipped).unwrap();
    let err = read_checkpoint::<f64>(&bad).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");

    let mut wrong_magic = bytes;
    wrong_magic[0] = b'X';
    fs::write(&bad, &wrong_magic).unwrap();
    assert!(read_checkpoint::<f64>(&bad).is_err());
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.prckpt");
    save_checkpoint(&stepped().0, None, 1, &path).unwrap();
    let wider = ViTConfig {
        embed_dim: 12,
        ..tiny()
    };
    let mut model = ViTModel::<f64>::for_classification(&wider, &mut SeededRng::new(0, 0)).unwrap();
    let before = model.clone();
    match load_into(&mut model, &path).unwrap_err() {
        Error::CheckpointShape { name, expected, found } => {
            assert!(!name.is_empty());
            assert_ne!(expected, found);
        }
        other => panic!("unexpected error {other}"),
    }
    // A failed load leaves the model untouched.
    assert_eq!(model, before);
}

#[test]
fn diff_lists_changed_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.prckpt"), dir.path().join("b.prckpt"));
    let (model, _) = stepped();
    save_checkpoint(&model, None, 1, &a).unwrap();
    save_checkpoint(&model, None, 2, &b).unwrap();
    assert!(diff_checkpoints(&a, &b).unwrap().is_empty());
    let mut changed = model.clone();
    changed.cls_token.tensor.data_mut()[0] += 0.5;
    save_checkpoint(&changed, None, 2, &b).unwrap();
    let diff = diff_checkpoints(&a, &b).unwrap();
    assert_eq!(diff.len(), 1);
    assert_eq!(diff[0].0, changed.cls_token.name);
    assert!((diff[0].1 - 0.5).abs() < 1e-12);
}

/// The committed fixture pins the on-disk layout: regenerating it must give
/// the same bytes, and loading it must give the same model. Set
/// `PATCHROT_UPDATE_GOLDEN=1` to rewrite it after a deliberate format change.
#[test]
fn golden_fixture_is_stable() {
    let model = golden_model();
    let dir = tempfile::tempdir().unwrap();
    let fresh = dir.path().join("tiny.prckpt");
    save_checkpoint(&model, None, 3, &fresh).unwrap();
    if std::env::var_os("PATCHROT_UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(fixture().parent().unwrap()).unwrap();
        fs::copy(&fresh, fixture()).unwrap();
    }
    let golden = fs::read(fixture()).expect("fixture present");
    assert_eq!(fs::read(&fresh).unwrap(), golden, "checkpoint bytes drifted from the fixture");
    let ck = load_checkpoint::<f32>(&fixture()).unwrap();
    assert_eq!(ck.epoch, 3);
    assert_eq!(ck.model, model);
    assert_eq!(ck.manifest.patch_heads, "distinct");
    assert_eq!(ck.manifest.grid, (3, 3));
}
