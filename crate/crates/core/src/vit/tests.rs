use super::*;
use crate::optim::{adamw_step, AdamW};
use crate::tensor::Distribution;

fn small_config() -> ViTConfig {
    ViTConfig {
        image_c: 3,
        image_h: 32,
        image_w: 32,
        patch_size: 4,
        embed_dim: 16,
        n_blocks: 3,
        n_heads: 2,
        expansion: 24,
        dropout: 0.1,
        n_downstream_classes: 10,
        head_hidden: Some(12),
        ..ViTConfig::default()
    }
}

fn images(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    SeededRng::new(seed, 0).draw(Distribution::UniformReal, &[b, c, h, w]).unwrap()
}

#[test]
fn tokenize_counts() {
    let t = tokenize(&Tensor::<f32>::zeros(&[3, 32, 32]), 4).unwrap();
    assert_eq!(t.shape(), &[64, 48]);
    let t = tokenize(&Tensor::<f32>::zeros(&[3, 24, 24]), 4).unwrap();
    assert_eq!(t.shape(), &[36, 48]);
    assert!(tokenize(&Tensor::<f32>::zeros(&[3, 30, 32]), 4).is_err());
}

#[test]
fn tokenize_order_is_row_major_channel_first() {
    // 1 channel 4x4 with value = y*4+x, P=2: patch 1 is the top-right block.
    let img = Tensor::<f64>::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let t = tokenize(&img, 2).unwrap();
    assert_eq!(t.row(0), &[0., 1., 4., 5.]);
    assert_eq!(t.row(1), &[2., 3., 6., 7.]);
    assert_eq!(t.row(2), &[8., 9., 12., 13.]);
    let img2 = Tensor::<f64>::new(&[2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
    assert_eq!(tokenize(&img2, 2).unwrap().row(0), &[0., 1., 2., 3., 4., 5., 6., 7.]);
}

#[test]
fn pretrain_and_downstream_shapes() {
    let cfg = small_config();
    let mut rng = SeededRng::new(1, 0);
    let model = ViTModel::<f64>::for_pretraining(&cfg, (6, 6), &mut rng).unwrap();
    let (cls, patch) = model.predict(&images(2, 3, 24, 24, 3), Mode::Pretrain).unwrap();
    assert_eq!(cls.shape(), &[2, 4]);
    assert_eq!(patch.unwrap().shape(), &[2, 36, 4]);

    let clf = ViTModel::<f64>::for_classification(&cfg, &mut rng).unwrap();
    let (cls, patch) = clf.predict(&images(2, 3, 32, 32, 4), Mode::Downstream).unwrap();
    assert_eq!(cls.shape(), &[2, 10]);
    assert!(patch.is_none());
    assert!(clf.predict(&images(2, 3, 24, 24, 4), Mode::Downstream).is_err());
}

#[test]
fn duplicate_images_give_identical_rows() {
    let cfg = small_config();
    let model = ViTModel::<f64>::for_classification(&cfg, &mut SeededRng::new(2, 0)).unwrap();
    let one = images(1, 3, 32, 32, 8);
    let mut two = Tensor::zeros(&[2, 3, 32, 32]);
    two.data_mut()[..3072].copy_from_slice(one.data());
    two.data_mut()[3072..].copy_from_slice(one.data());
    let (cls, _) = model.predict(&two, Mode::Downstream).unwrap();
    assert_eq!(cls.row(0), cls.row(1));
}

#[test]
fn interpolation_cases() {
    let pe = Tensor::<f64>::new(&[5, 2], (0..10).map(f64::from).collect()).unwrap();
    assert_eq!(interpolate_pos_embed(&pe, (2, 2), (2, 2)).unwrap(), pe);

    let mut constant = Tensor::<f64>::full(&[37, 3], 0.7);
    constant.data_mut()[..3].copy_from_slice(&[9., 9., 9.]);
    let up = interpolate_pos_embed(&constant, (6, 6), (8, 8)).unwrap();
    assert_eq!(up.shape(), &[65, 3]);
    assert_eq!(up.row(0), &[9., 9., 9.]);
    assert!(up.data()[3..].iter().all(|v| (v - 0.7).abs() < 1e-12));

    let grid = Tensor::<f64>::from_f64(&[5, 1], &[-1., 0., 1., 2., 3.]).unwrap();
    let mid = interpolate_pos_embed(&grid, (2, 2), (3, 3)).unwrap();
    assert!((mid.data()[1 + 4] - 1.5).abs() < 1e-12);
    assert_eq!(mid.data()[0], -1.0);

    assert!(interpolate_pos_embed(&grid, (3, 2), (3, 3)).is_err());
}

#[test]
fn set_grid_grows_positional_rows() {
    let mut cfg = small_config();
    cfg.share_patch_heads = true;
    let mut model = ViTModel::<f32>::for_pretraining(&cfg, (6, 6), &mut SeededRng::new(3, 0)).unwrap();
    assert_eq!(model.pos_embed.tensor.shape(), &[1, 37, 16]);
    model.set_grid((8, 8)).unwrap();
    assert_eq!(model.pos_embed.tensor.shape(), &[1, 65, 16]);
}

#[test]
fn freeze_nf_and_mlp() {
    let cfg = small_config();
    let mut model = ViTModel::<f32>::for_classification(&cfg, &mut SeededRng::new(4, 0)).unwrap();
    apply_freeze(&mut model, FreezeSpec::NoFreeze).unwrap();
    assert!(model.parameters().iter().all(|p| p.trainable));
    apply_freeze(&mut model, FreezeSpec::Mlp).unwrap();
    let trainable: Vec<&str> = model
        .parameters()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.as_str())
        .collect();
    assert_eq!(trainable, ["head.fc2.weight", "head.fc2.bias"]);
    assert!(apply_freeze(&mut model, FreezeSpec::Block(4)).is_err());
    assert!("EB0".parse::<FreezeSpec>().is_err());
    assert!("XYZ".parse::<FreezeSpec>().is_err());
}

#[test]
fn freeze_partition_is_monotone() {
    let cfg = small_config();
    let mut model = ViTModel::<f32>::for_classification(&cfg, &mut SeededRng::new(5, 0)).unwrap();
    let mut previous: Option<Vec<bool>> = None;
    for spec in FreezeSpec::sweep(cfg.n_blocks) {
        apply_freeze(&mut model, spec).unwrap();
        let frozen: Vec<bool> = model.parameters().iter().map(|p| !p.trainable).collect();
        if let Some(prev) = &previous {
            assert!(prev.iter().zip(&frozen).all(|(&a, &b)| !a || b), "{spec} is not a superset");
        }
        previous = Some(frozen);
    }
}

#[test]
fn frozen_block_unchanged_after_step() {
    let cfg = small_config();
    let mut model = ViTModel::<f64>::for_classification(&cfg, &mut SeededRng::new(6, 0)).unwrap();
    apply_freeze(&mut model, FreezeSpec::Block(3)).unwrap();
    let before = model.blocks[0].clone();
    let mut opt = AdamW::new(1e-2, 0.03);
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, &images(2, 3, 32, 32, 1), Mode::Downstream, &mut ForwardCtx::eval())
        .unwrap();
    let loss = crate::nn::softmax_cross_entropy(&mut g, out.cls_logits, &[1, 7]).unwrap();
    g.backward(loss).unwrap();
    adamw_step(&mut model, &g, &mut opt).unwrap();
    assert_eq!(model.blocks[0], before);
    assert_ne!(model.blocks[2], {
        let fresh = ViTModel::<f64>::for_classification(&cfg, &mut SeededRng::new(6, 0)).unwrap();
        fresh.blocks[2].clone()
    });
}

#[test]
fn replace_head_keeps_hidden_layer() {
    let cfg = small_config();
    let mut rng = SeededRng::new(7, 0);
    let mut model = ViTModel::<f32>::for_pretraining(&cfg, (6, 6), &mut rng).unwrap();
    let hidden = model.head.fc1.clone();
    let old_out = model.head.fc2.clone();
    model.replace_head(10, &mut rng).unwrap();
    assert_eq!(model.head.fc1, hidden);
    assert_eq!(model.head_classes(), 10);
    assert!(!model.has_patch_heads());
    assert!(model.predict(&images(1, 3, 24, 24, 0).cast(), Mode::Pretrain).is_err());

    let mut same = ViTModel::<f32>::for_classification(&cfg, &mut rng).unwrap();
    // Pretend the head was trained; replacement resets it to zero.
    same.head.fc2.weight.tensor.data_mut().fill(0.5);
    same.head.fc2.bias.tensor.data_mut().fill(-0.25);
    let before = same.head.fc2.clone();
    same.replace_head(10, &mut rng).unwrap();
    assert_ne!(same.head.fc2, before);
    assert_eq!(same.head.fc2.weight.tensor.shape(), before.weight.tensor.shape());
    assert!(same.head.fc2.parameters().iter().all(|p| p.tensor.data().iter().all(|&v| v == 0.0)));
    assert_eq!(old_out.weight.tensor.shape(), &[cfg.n_rotation_classes, 12]);
    assert_eq!(model.head.fc2.weight.tensor.shape(), &[10, 12]);
    assert!(same.replace_head(0, &mut rng).is_err());
}

fn hand_count(c: &ViTConfig, n: usize, k: usize, patch_heads: usize) -> usize {
    let (h, x, hid, d) = (c.embed_dim, c.expansion, c.hidden(), c.patch_dim());
    let embed = d * h + h + h + (n + 1) * h;
    let block = 4 * h + 4 * (h * h + h) + (h * x + x) + (x * h + h);
    let head = h * hid + hid + hid * k + k;
    let per_patch_head = h * hid + hid + hid * c.n_rotation_classes + c.n_rotation_classes;
    embed + c.n_blocks * block + 2 * h + head + patch_heads * per_patch_head
}

#[test]
fn parameter_count_matches_formula() {
    let cfg = ViTConfig::default();
    let model = ViTModel::<f32>::for_classification(&cfg, &mut SeededRng::new(0, 0)).unwrap();
    assert_eq!(model.num_parameters(), hand_count(&cfg, 64, 10, 0));
    assert_eq!(model.num_parameters(), 3_788_042);

    let small = small_config();
    let pre = ViTModel::<f32>::for_pretraining(&small, (6, 6), &mut SeededRng::new(0, 0)).unwrap();
    assert_eq!(pre.num_parameters(), hand_count(&small, 36, 4, 36));
    let mut reuse = small.clone();
    reuse.reuse_m0_head = true;
    let pre = ViTModel::<f32>::for_pretraining(&reuse, (6, 6), &mut SeededRng::new(0, 0)).unwrap();
    assert_eq!(pre.num_parameters(), hand_count(&reuse, 36, 4, 0));
}

#[test]
fn names_are_unique() {
    let model = ViTModel::<f32>::for_pretraining(&small_config(), (6, 6), &mut SeededRng::new(0, 0)).unwrap();
    let mut names: Vec<&str> = model.parameters().iter().map(|p| p.name.as_str()).collect();
    let total = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), total);
}

#[test]
fn token_permutation_with_zero_positions() {
    // Shared patch heads so the per-position MLP does not break the symmetry.
    let mut cfg = small_config();
    cfg.share_patch_heads = true;
    cfg.image_h = 8;
    cfg.image_w = 8;
    let mut model = ViTModel::<f64>::for_pretraining(&cfg, (2, 2), &mut SeededRng::new(9, 0)).unwrap();
    model.pos_embed.tensor = Tensor::zeros(&[1, 5, 16]);
    let img = images(1, 3, 8, 8, 2);
    // Swap the top-left and bottom-right 4x4 patches.
    let mut swapped = img.clone();
    for ch in 0..3 {
        for y in 0..4 {
            for x in 0..4 {
                let a = (ch * 8 + y) * 8 + x;
                let b = (ch * 8 + y + 4) * 8 + x + 4;
                swapped.data_mut()[a] = img.data()[b];
                swapped.data_mut()[b] = img.data()[a];
            }
        }
    }
    let (c1, p1) = model.predict(&img, Mode::Pretrain).unwrap();
    let (c2, p2) = model.predict(&swapped, Mode::Pretrain).unwrap();
    for (a, b) in c1.data().iter().zip(c2.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let (p1, p2) = (p1.unwrap(), p2.unwrap());
    let perm = [3usize, 1, 2, 0];
    for (dst, &src) in perm.iter().enumerate() {
        for k in 0..4 {
            assert!((p2.data()[dst * 4 + k] - p1.data()[src * 4 + k]).abs() < 1e-12);
        }
    }
}
