use proptest::prelude::*;

use patchrot::data::{load_raw_archive, write_raw_archive, Dataset};
use patchrot::eval::topk_accuracy;
use patchrot::optim::LrSchedule;
use patchrot::pretext::{compute_reduced_geometry, rotate_patch_labels, rotate_quarter};
use patchrot::vit::{interpolate_pos_embed, tokenize};
use patchrot::Tensor;

fn image(c: usize, h: usize, w: usize, values: &[f64]) -> Tensor<f64> {
    Tensor::new(&[c, h, w], values.iter().cycle().take(c * h * w).copied().collect()).unwrap()
}

/// Independent oracle: a counter-clockwise quarter turn sends the pixel at
/// row `r`, column `c` of an `h×w` image to row `w-1-c`, column `r`.
fn scatter_turn(x: &Tensor<f64>) -> Tensor<f64> {
    let [ch, h, w] = x.shape()[..] else { unreachable!() };
    let mut out = vec![0.0; ch * h * w];
    for k in 0..ch {
        for r in 0..h {
            for c in 0..w {
                out[k * h * w + (w - 1 - c) * h + r] = x.data()[k * h * w + r * w + c];
            }
        }
    }
    Tensor::new(&[ch, w, h], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quarter_turns_form_z4(c in 1usize..4, h in 1usize..7, w in 1usize..7, a in 0usize..4, b in 0usize..4,
                             values in prop::collection::vec(-10.0f64..10.0, 1..40)) {
        let x = image(c, h, w, &values);
        prop_assert_eq!(rotate_quarter(&x, 0).unwrap(), x.clone());
        let ab = rotate_quarter(&rotate_quarter(&x, a).unwrap(), b).unwrap();
        prop_assert_eq!(ab, rotate_quarter(&x, (a + b) % 4).unwrap());
        let mut y = x.clone();
        for _ in 0..a {
            y = scatter_turn(&y);
        }
        prop_assert_eq!(rotate_quarter(&x, a).unwrap(), y);
    }

    #[test]
    fn rotation_preserves_pixel_multiset(h in 1usize..6, w in 1usize..6, k in 0usize..4,
                                         values in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let x = image(2, h, w, &values);
        let y = rotate_quarter(&x, k).unwrap();
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn turned_patch_labels_compose(n in 1usize..6, a in 0usize..4, b in 0usize..4,
                                   labels in prop::collection::vec(0usize..4, 36)) {
        let labels = &labels[..n * n];
        let ab = rotate_patch_labels(&rotate_patch_labels(labels, n, n, a), n, n, b);
        prop_assert_eq!(ab, rotate_patch_labels(labels, n, n, (a + b) % 4));
    }

    #[test]
    fn reduced_geometry_formula(h in 2usize..80, w in 2usize..80, p in 1usize..12, b in 0usize..4) {
        match compute_reduced_geometry(h, w, p, b) {
            Ok(g) => {
                prop_assert_eq!(g.h_pr, p * (h / (p + b)));
                prop_assert_eq!(g.w_pr, p * (w / (p + b)));
                prop_assert_eq!(g.n_pr, (h / (p + b)) * (w / (p + b)));
                prop_assert!(g.h_pr <= h && g.w_pr <= w);
                prop_assert!(g.n_pr >= 1);
            }
            Err(_) => prop_assert!(p + b > h.min(w)),
        }
    }

    #[test]
    fn tokens_cover_the_image(g in 1usize..6, p in 1usize..5, c in 1usize..4) {
        let x = image(c, g * p, g * p, &[1.0, 2.0, 3.0]);
        let t = tokenize(&x, p).unwrap();
        prop_assert_eq!(t.shape(), &[g * g, c * p * p][..]);
        let (mut a, mut b) = (x.data().to_vec(), t.data().to_vec());
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn interpolation_reproduces_affine_fields(oh in 2usize..7, ow in 2usize..7, nh in 2usize..10, nw in 2usize..10,
                                              ay in -2.0f64..2.0, ax in -2.0f64..2.0, c0 in -1.0f64..1.0) {
        // Corner-aligned bilinear resampling is exact on f(u, v) = ay·u + ax·v + c0
        // with u, v the normalised grid coordinates in [0, 1].
        let field = |gh: usize, gw: usize| {
            let mut rows = vec![9.0];
            for y in 0..gh {
                for x in 0..gw {
                    rows.push(ay * y as f64 / (gh - 1) as f64 + ax * x as f64 / (gw - 1) as f64 + c0);
                }
            }
            Tensor::new(&[gh * gw + 1, 1], rows).unwrap()
        };
        let out = interpolate_pos_embed(&field(oh, ow), (oh, ow), (nh, nw)).unwrap();
        let want = field(nh, nw);
        for (a, b) in out.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn topk_is_monotone(rows in 1usize..8, classes in 2usize..8, seed in 0u64..1000) {
        let mut rng = patchrot::SeededRng::new(seed, 0);
        let logits: Tensor<f64> = rng.draw(patchrot::tensor::Distribution::UniformReal, &[rows, classes]).unwrap();
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
        let mut last = 0.0;
        for k in 1..=classes {
            let acc = topk_accuracy(&logits, &labels, k).unwrap();
            prop_assert!(acc >= last);
            last = acc;
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn schedule_warms_up_then_decays(base in 1e-5f64..1e-2, warm in 0usize..5, extra in 1usize..20, spe in 1usize..6) {
        let s = LrSchedule { base_lr: base, min_lr: 0.0, warmup_epochs: warm, total_epochs: warm + extra };
        let lrs: Vec<f64> = (0..(warm + extra) * spe).map(|t| s.lr_at(t, spe)).collect();
        let w = warm * spe;
        prop_assert!(lrs[..w].windows(2).all(|p| p[1] > p[0]));
        prop_assert!(lrs[w..].windows(2).all(|p| p[1] <= p[0] + 1e-18));
        prop_assert!(lrs.iter().all(|&l| l <= base * (1.0 + 1e-12) && l >= 0.0));
    }

    #[test]
    fn raw_archive_round_trip(n in 1usize..6, c in 1usize..4, side in 1usize..6, k in 1usize..12, seed in 0u64..100) {
        let mut rng = patchrot::SeededRng::new(seed, 0);
        let per = c * side * side;
        let pixels: Vec<f32> = (0..n * per).map(|_| rng.below(256) as f32 / 255.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let ds = Dataset::new("prop", (c, side, side), k, pixels, labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.primg");
        write_raw_archive(&ds, &path).unwrap();
        let back = load_raw_archive(&path).unwrap();
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.shape(), ds.shape());
        prop_assert_eq!(back.meta.n_classes, k);
        prop_assert!(back.all_pixels().iter().zip(ds.all_pixels()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
