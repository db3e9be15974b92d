use super::*;
use crate::tensor::Distribution;

fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    SeededRng::new(seed, 3).draw(Distribution::UniformReal, &[c, h, w]).unwrap()
}

/// Image whose pixel values encode their own coordinates, so provenance can
/// be read back from any output pixel.
fn coordinate_image(c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(&[c, h, w], (0..c * h * w).map(|i| i as f64).collect()).unwrap()
}

#[test]
fn rotation_manual_cases() {
    let x = Tensor::<f64>::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap();
    assert_eq!(rotate_quarter(&x, 0).unwrap(), x);
    assert_eq!(rotate_quarter(&x, 1).unwrap().data(), &[2., 4., 1., 3.]);
    assert_eq!(rotate_quarter(&x, 2).unwrap().data(), &[4., 3., 2., 1.]);
    assert_eq!(rotate_quarter(&x, 3).unwrap().data(), &[3., 1., 4., 2.]);
    assert!(rotate_quarter(&x, 4).is_err());

    let mut y = x.clone();
    for _ in 0..4 {
        y = rotate_quarter(&y, 1).unwrap();
    }
    assert_eq!(y, x);
}

#[test]
fn rotation_of_rectangles_swaps_sides() {
    // 2x3: [[0,1,2],[3,4,5]] turned CCW is 3x2 [[2,5],[1,4],[0,3]].
    let x = Tensor::<f64>::from_f64(&[1, 2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap();
    let r = rotate_quarter(&x, 1).unwrap();
    assert_eq!(r.shape(), &[1, 3, 2]);
    assert_eq!(r.data(), &[2., 5., 1., 4., 0., 3.]);
    assert_eq!(rotate_quarter(&r, 3).unwrap(), x);
}

#[test]
fn rotation_is_a_z4_action() {
    for seed in 0..50 {
        let x = random_image(3, 5, 5, seed);
        for a in 0..4 {
            for b in 0..4 {
                let lhs = rotate_quarter(&rotate_quarter(&x, a).unwrap(), b).unwrap();
                assert_eq!(lhs, rotate_quarter(&x, (a + b) % 4).unwrap());
            }
        }
    }
    let a = RotationLabel::new(3).unwrap();
    assert_eq!(a.compose(RotationLabel::new(2).unwrap()).get(), 1);
    assert_eq!(a.inverse().get(), 1);
    assert!(RotationLabel::new(4).is_err());
}

#[test]
fn geometry_table() {
    let g = compute_reduced_geometry(32, 32, 4, 1).unwrap();
    assert_eq!((g.h_pr, g.w_pr, g.n_pr), (24, 24, 36));
    let g = compute_reduced_geometry(64, 64, 8, 2).unwrap();
    assert_eq!((g.h_pr, g.w_pr, g.n_pr), (48, 48, 36));
    let g = compute_reduced_geometry(32, 32, 4, 0).unwrap();
    assert_eq!((g.h_pr, g.n_pr), (32, 64));
    assert!(compute_reduced_geometry(8, 8, 6, 3).is_err());
    let o = BufferedGrid::original_size(32, 32, 4, 1).unwrap();
    assert_eq!((o.h_pr, o.n_pr, o.crop), (32, 64, 3));
    assert!(BufferedGrid::original_size(32, 32, 4, 4).is_err());
}

#[test]
fn image_rotation_samples() {
    let grid = compute_reduced_geometry(32, 32, 4, 1).unwrap();
    let img = random_image(3, 32, 32, 1);
    let samples = make_image_rotation_samples(&img, &grid, &mut SeededRng::new(5, 0)).unwrap();
    assert_eq!(samples.iter().map(|s| s.1).collect::<Vec<_>>(), [0, 1, 2, 3]);
    assert_eq!(samples[0].0.shape(), &[3, 24, 24]);
    assert_eq!(samples[2].0, rotate_quarter(&samples[0].0, 2).unwrap());
    assert!(make_image_rotation_samples(&random_image(3, 20, 20, 0), &grid, &mut SeededRng::new(0, 0)).is_err());
}

#[test]
fn zero_buffer_identity_rotations_tile_back() {
    let grid = compute_reduced_geometry(12, 12, 4, 0).unwrap();
    let img = random_image(2, 12, 12, 4);
    let flags = PretextFlags {
        force_zero_rotation: true,
        ..PretextFlags::default()
    };
    let s = make_patch_rotation_with(&img, &grid, &mut SeededRng::new(0, 0), &flags).unwrap();
    assert_eq!(s.image, img);
    assert!(s.labels.iter().all(|&l| l == 0));

    // 14x14 with 3 cells of 4 leaves a border; the partition is centred.
    let grid = compute_reduced_geometry(14, 14, 4, 0).unwrap();
    let img = coordinate_image(1, 14, 14);
    let s = make_patch_rotation_with(&img, &grid, &mut SeededRng::new(0, 0), &flags).unwrap();
    assert_eq!(s.image.data()[0], 15.0);
}

#[test]
fn patch_provenance_and_gaps() {
    let (h, p, b) = (32, 4, 1);
    let grid = compute_reduced_geometry(h, h, p, b).unwrap();
    let img = coordinate_image(3, h, h);
    for seed in 0..40 {
        let s = make_patch_rotation_sample(&img, &grid, &mut SeededRng::new(seed, 0)).unwrap();
        assert_eq!(s.labels.len(), 36);
        for (n, &(sy, sx)) in s.offsets.iter().enumerate() {
            let (gy, gx) = (n / grid.g_w, n % grid.g_w);
            // Un-rotate the patch and compare with the source crop.
            let mut patch = vec![0.0; 3 * p * p];
            for ch in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        patch[(ch * p + y) * p + x] = s.image.get(&[ch, gy * p + y, gx * p + x]);
                    }
                }
            }
            let back = rotate_slice(&patch, 3, p, p, (4 - s.labels[n]) % 4);
            for ch in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        let want = ((ch * h + sy + y) * h + sx + x) as f64;
                        assert_eq!(back[(ch * p + y) * p + x], want);
                    }
                }
            }
        }
        for gy in 0..grid.g_h {
            for gx in 0..grid.g_w - 1 {
                let (a, c) = (s.offsets[gy * grid.g_w + gx], s.offsets[gy * grid.g_w + gx + 1]);
                let gap = c.1 - (a.1 + p);
                assert!(gap <= 2 * b);
            }
        }
        for gy in 0..grid.g_h - 1 {
            let (a, c) = (s.offsets[gy * grid.g_w], s.offsets[(gy + 1) * grid.g_w]);
            assert!(c.0 - (a.0 + p) <= 2 * b);
        }
    }
}

#[test]
fn patch_label_frequencies() {
    let grid = compute_reduced_geometry(32, 32, 4, 1).unwrap();
    let img = random_image(1, 32, 32, 0);
    let mut counts = [0usize; 4];
    let mut rng = SeededRng::new(17, 0);
    let mut total = 0;
    while total < 10_000 {
        let s = make_patch_rotation_sample(&img, &grid, &mut rng).unwrap();
        for l in s.labels {
            counts[l] += 1;
            total += 1;
        }
    }
    let sigma = (total as f64 * 0.25 * 0.75).sqrt();
    for c in counts {
        assert!((c as f64 - total as f64 * 0.25).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn original_size_patches_are_resized_crops() {
    let grid = BufferedGrid::original_size(8, 8, 4, 1).unwrap();
    // Constant image stays constant through the bilinear resize.
    let img = Tensor::<f64>::full(&[1, 8, 8], 0.25);
    let s = make_patch_rotation_sample(&img, &grid, &mut SeededRng::new(1, 0)).unwrap();
    assert_eq!(s.image.shape(), &[1, 8, 8]);
    assert!(s.image.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    // Corners of a resized crop are exact source pixels.
    let coords = coordinate_image(1, 8, 8);
    let flags = PretextFlags {
        force_zero_rotation: true,
        original_size: true,
        ..PretextFlags::default()
    };
    let s = make_patch_rotation_with(&coords, &grid, &mut SeededRng::new(2, 0), &flags).unwrap();
    let (sy, sx) = s.offsets[0];
    assert_eq!(s.image.get(&[0, 0, 0]), (sy * 8 + sx) as f64);
    assert_eq!(s.image.get(&[0, 3, 3]), ((sy + 2) * 8 + sx + 2) as f64);
}

#[test]
fn batch_sizes_per_flags() {
    let grid = compute_reduced_geometry(32, 32, 4, 1).unwrap();
    let imgs: Vec<Tensor<f32>> = (0..128).map(|i| random_image(3, 32, 32, i).cast()).collect();
    let rng = SeededRng::new(0, 0);
    let batch = assemble_pretext_batch(&imgs, &grid, &rng, &PretextFlags::default()).unwrap();
    assert_eq!(batch.len(), 640);
    assert_eq!(batch.images.shape(), &[640, 3, 24, 24]);
    assert_eq!(batch.image_rows.len(), 512);
    assert_eq!(batch.patch_rows.len(), 128);
    assert_eq!(batch.patch_labels.len(), 128 * 36);
    for chunk in batch.image_labels.chunks(4) {
        assert_eq!(chunk, [0, 1, 2, 3]);
    }

    let few = &imgs[..3];
    let np = PretextFlags {
        no_patch_rot: true,
        ..PretextFlags::default()
    };
    let b = assemble_pretext_batch(few, &grid, &rng, &np).unwrap();
    assert_eq!((b.len(), b.patch_rows.len()), (12, 0));
    let ni = PretextFlags {
        no_image_rot: true,
        ..PretextFlags::default()
    };
    let b = assemble_pretext_batch(few, &grid, &rng, &ni).unwrap();
    assert_eq!((b.len(), b.image_rows.len()), (3, 0));
    let both = PretextFlags {
        no_image_rot: true,
        no_patch_rot: true,
        ..PretextFlags::default()
    };
    assert!(assemble_pretext_batch(few, &grid, &rng, &both).is_err());

    let rip = PretextFlags {
        rotate_img_and_patch: true,
        ..PretextFlags::default()
    };
    let b = assemble_pretext_batch(few, &grid, &rng, &rip).unwrap();
    assert_eq!((b.len(), b.image_rows.len(), b.patch_rows.len()), (15, 15, 3));
}

#[test]
fn rotate_img_and_patch_labels_follow_the_patches() {
    // A 2x2 label grid [[0,1],[2,3]] turned CCW once moves the top-right
    // patch to the top-left and adds one quarter turn to every patch.
    assert_eq!(rotate_patch_labels(&[0, 1, 2, 3], 2, 2, 1), vec![2, 0, 1, 3]);
    assert_eq!(rotate_patch_labels(&[0, 1, 2, 3], 2, 2, 0), vec![0, 1, 2, 3]);

    // End to end: undoing the global turn then each patch label's turn
    // recovers an unrotated tiling.
    let grid = compute_reduced_geometry(8, 8, 4, 0).unwrap();
    let img = coordinate_image(1, 8, 8);
    let flags = PretextFlags {
        rotate_img_and_patch: true,
        ..PretextFlags::default()
    };
    for seed in 0..20 {
        let b = assemble_pretext_batch(&[img.clone()], &grid, &SeededRng::new(seed, 0), &flags).unwrap();
        let row = b.patch_rows[0];
        let x = Tensor::new(&[1, 8, 8], b.images.data()[row * 64..(row + 1) * 64].to_vec()).unwrap();
        let gturn = b.image_labels[b.image_rows.iter().position(|&r| r == row).unwrap()];
        let labels = &b.patch_labels[..4];
        for n in 0..4 {
            let (gy, gx) = (n / 2, n % 2);
            let patch: Vec<f64> = (0..16).map(|i| x.get(&[0, gy * 4 + i / 4, gx * 4 + i % 4])).collect();
            let upright = rotate_slice(&patch, 1, 4, 4, (4 - labels[n]) % 4);
            // An upright patch of the coordinate image increases by 1 along rows.
            assert_eq!(upright[1] - upright[0], 1.0, "seed {seed} turn {gturn} patch {n}");
            assert_eq!(upright[4] - upright[0], 8.0);
        }
    }
}

#[test]
fn loss_reductions_and_uniform_value() {
    let grid = compute_reduced_geometry(8, 8, 4, 0).unwrap();
    let imgs: Vec<Tensor<f64>> = (0..2).map(|i| random_image(1, 8, 8, i)).collect();
    let batch = assemble_pretext_batch(&imgs, &grid, &SeededRng::new(0, 0), &PretextFlags::default()).unwrap();
    let mut g = Graph::<f64>::new();
    let cls = g.leaf(&Tensor::zeros(&[10, 4]));
    let patches = g.leaf(&Tensor::zeros(&[10, 4, 4]));
    let loss = patchrot_loss(&mut g, cls, Some(patches), &batch, LossReduction::Mean).unwrap();
    let ln4 = 4f64.ln();
    assert!((g.item(loss.total) - 2.0 * ln4).abs() < 1e-12);
    assert!((g.item(loss.image_term.unwrap()) - ln4).abs() < 1e-12);
    let sum = patchrot_loss(&mut g, cls, Some(patches), &batch, LossReduction::Sum).unwrap();
    assert!((g.item(sum.total) - (8.0 + 8.0) * ln4).abs() < 1e-9);
}

#[test]
fn image_only_batch_is_plain_cross_entropy() {
    let grid = compute_reduced_geometry(8, 8, 4, 0).unwrap();
    let imgs: Vec<Tensor<f64>> = (0..3).map(|i| random_image(1, 8, 8, i)).collect();
    let flags = PretextFlags {
        no_patch_rot: true,
        ..PretextFlags::default()
    };
    let batch = assemble_pretext_batch(&imgs, &grid, &SeededRng::new(0, 0), &flags).unwrap();
    let logits: Tensor<f64> = SeededRng::new(9, 0).draw(Distribution::Normal { mean: 0.0, std: 2.0 }, &[12, 4]).unwrap();
    let mut g = Graph::new();
    let l = g.leaf(&logits);
    let loss = patchrot_loss(&mut g, l, None, &batch, LossReduction::Mean).unwrap();
    let mut want = 0.0;
    for (r, &y) in batch.image_labels.iter().enumerate() {
        let row = logits.row(r);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - row[y];
    }
    assert!((g.item(loss.total) - want / 12.0).abs() < 1e-12);
}

#[test]
fn perfect_logits_give_near_zero_loss() {
    let grid = compute_reduced_geometry(8, 8, 4, 0).unwrap();
    let imgs: Vec<Tensor<f64>> = (0..2).map(|i| random_image(1, 8, 8, i)).collect();
    let batch = assemble_pretext_batch(&imgs, &grid, &SeededRng::new(0, 0), &PretextFlags::default()).unwrap();
    let mut cls = Tensor::zeros(&[10, 4]);
    for (&r, &y) in batch.image_rows.iter().zip(&batch.image_labels) {
        cls.data_mut()[r * 4 + y] = 50.0;
    }
    let mut patches = Tensor::zeros(&[10, 4, 4]);
    for (j, &r) in batch.patch_rows.iter().enumerate() {
        for n in 0..4 {
            patches.data_mut()[(r * 4 + n) * 4 + batch.patch_labels[j * 4 + n]] = 50.0;
        }
    }
    let counts = pretext_counts(&cls, Some(&patches), &batch);
    assert_eq!(counts.image_accuracy(), 1.0);
    assert_eq!(counts.patch_accuracy(), 1.0);
    let mut g = Graph::new();
    let (c, p) = (g.leaf(&cls), g.leaf(&patches));
    let loss = patchrot_loss(&mut g, c, Some(p), &batch, LossReduction::Mean).unwrap();
    assert!(g.item(loss.total) < 1e-12);
    let wrong = g.leaf(&Tensor::zeros(&[9, 4]));
    assert!(patchrot_loss(&mut g, wrong, Some(p), &batch, LossReduction::Mean).is_err());
}
