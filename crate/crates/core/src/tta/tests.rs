use super::*;
use crate::rng;
use proptest::prelude::*;
use rand::Rng;

fn random_grid(rows: usize, cols: usize, dim: usize, seed: u64) -> FeatureGrid<f32> {
    let mut r = rng::stream(seed, "tta-test-grid");
    FeatureGrid::from_fn(rows, cols, dim, |_, _, _| r.gen_range(-1.0..1.0))
}

fn ramp_image(h: usize, w: usize) -> Image {
    let data = (0..h * w * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
    Image::new(h, w, data).unwrap()
}

/// Per-patch mean colour: exactly shift- and flip-equivariant.
fn mean_color_teacher(k: usize) -> impl Fn(&Image) -> Result<FeatureGrid<f32>> {
    move |img: &Image| {
        let (rows, cols) = (img.height() / k, img.width() / k);
        Ok(FeatureGrid::from_fn(rows, cols, 3, |r, c, ch| {
            let mut s = 0.0;
            for y in r * k..(r + 1) * k {
                for x in c * k..(c + 1) * k {
                    s += img.pixel(y, x)[ch];
                }
            }
            s / (k * k) as f32
        }))
    }
}

#[test]
fn single_view_is_identity() {
    let p = sample_aug_params(&mut rng::stream(0, "aug"), 1, 0.15, 0.5, 8, (64, 64)).unwrap();
    assert_eq!(p, vec![AugmentationParams::IDENTITY]);
    assert!(sample_aug_params(&mut rng::stream(0, "aug"), 0, 0.15, 0.5, 8, (64, 64)).is_err());
}

#[test]
fn sampled_shifts_respect_bounds_and_quantization() {
    let (h, w, k) = (448, 320, 16);
    let mut r = rng::stream(1, "aug");
    let p = sample_aug_params(&mut r, 500, 0.15, 0.5, k, (h, w)).unwrap();
    assert!(p[0].is_identity());
    let flips = p.iter().filter(|a| a.flip).count();
    assert!((150..350).contains(&flips));
    for a in &p {
        assert_eq!(a.shift_x % k as i64, 0);
        assert_eq!(a.shift_y % k as i64, 0);
        assert!(a.shift_x.abs() as f64 <= 0.15 * w as f64);
        assert!(a.shift_y.abs() as f64 <= 0.15 * h as f64);
    }
}

#[test]
fn quantization_rounds_to_nearest_multiple() {
    // 0.1 of 448 px = 44.8 px -> 2.8 patches of 16 -> 3 patches = 48 px.
    assert_eq!(quantize_shift(0.1 * 448.0, 16, 0.15 * 448.0), 48);
    assert_eq!(quantize_shift(-44.8, 16, 67.2), -48);
    // Ties go toward zero.
    assert_eq!(quantize_shift(24.0, 16, 100.0), 16);
    assert_eq!(quantize_shift(-24.0, 16, 100.0), -16);
    // Rounding up past the bound steps back.
    assert_eq!(quantize_shift(4.8, 8, 4.8), 0);
}

#[test]
fn identity_transform_changes_nothing() {
    let img = ramp_image(32, 32);
    let coords = CoordGrid::identity(4, 4);
    let (i2, c2) = transform(&img, &coords, &AugmentationParams::IDENTITY, 8, PadMode::MeanColor).unwrap();
    assert_eq!(i2, img);
    assert_eq!(c2, coords);
}

#[test]
fn flip_twice_is_identity() {
    let img = ramp_image(32, 32);
    let coords = CoordGrid::identity(4, 4);
    let flip = AugmentationParams { flip: true, ..Default::default() };
    let (i1, c1) = transform(&img, &coords, &flip, 8, PadMode::White).unwrap();
    let (i2, c2) = transform(&i1, &c1, &flip, 8, PadMode::White).unwrap();
    assert_eq!(i2, img);
    assert_eq!(c2, coords);
}

#[test]
fn shift_by_one_patch_moves_columns() {
    let k = 8;
    let img = ramp_image(32, 32);
    let coords = CoordGrid::identity(4, 4);
    let theta = AugmentationParams { shift_x: k as i64, ..Default::default() };
    let (out, moved) = transform(&img, &coords, &theta, k, PadMode::MeanColor).unwrap();
    for r in 0..4 {
        assert_eq!(moved.get(r, 0), None);
        for c in 0..3 {
            assert_eq!(moved.get(r, c + 1), coords.get(r, c));
        }
    }
    let before = extract(&img, k);
    let after = extract(&out, k);
    for r in 0..4 {
        assert!(after.token(r, 0).iter().all(|&v| v == 0.5));
        for c in 0..3 {
            assert_eq!(after.token(r, c + 1), before.token(r, c));
        }
    }
    let (white, _) = transform(&img, &coords, &theta, k, PadMode::White).unwrap();
    assert_eq!(white.pixel(0, 0), [1.0; 3]);
}

fn extract(img: &Image, k: usize) -> FeatureGrid<f32> {
    let t = crate::vit::extract_patches::<f32>(img, k).unwrap();
    FeatureGrid::from_tensor(img.height() / k, img.width() / k, &t).unwrap()
}

#[test]
fn misaligned_shift_is_rejected() {
    let img = ramp_image(32, 32);
    let coords = CoordGrid::identity(4, 4);
    let theta = AugmentationParams { shift_x: 3, ..Default::default() };
    assert!(transform(&img, &coords, &theta, 8, PadMode::MeanColor).is_err());
}

#[test]
fn restore_after_identity_is_input() {
    let g = random_grid(4, 5, 3, 1);
    let (placed, mask) = inverse_restore(&g, &CoordGrid::identity(4, 5)).unwrap();
    assert_eq!(placed, g);
    assert!(mask.iter().all(|&m| m));
}

#[test]
fn restore_after_shift_and_flip() {
    let k = 8;
    let original = random_grid(4, 4, 2, 2);
    let coords = CoordGrid::identity(4, 4);
    // Simulate an equivariant teacher by moving the grid itself.
    for theta in [
        AugmentationParams { shift_x: 8, shift_y: -8, flip: false },
        AugmentationParams { shift_x: -16, shift_y: 0, flip: true },
        AugmentationParams { shift_x: 0, shift_y: 0, flip: true },
    ] {
        let moved = coords.transformed(&theta, k);
        let mut feats = FeatureGrid::zeros(4, 4, 2);
        for r in 0..4 {
            for c in 0..4 {
                if let Some((sr, sc)) = moved.source(r, c) {
                    feats.token_mut(r, c).copy_from_slice(original.token(sr, sc));
                }
            }
        }
        let (placed, mask) = inverse_restore(&feats, &moved).unwrap();
        let mut valid = 0;
        for r in 0..4 {
            for c in 0..4 {
                if mask[r * 4 + c] {
                    valid += 1;
                    assert_eq!(placed.token(r, c), original.token(r, c));
                }
            }
        }
        assert_eq!(valid, moved.valid_count());
        let expected_valid = (4 - (theta.shift_x / 8).unsigned_abs() as usize) * (4 - (theta.shift_y / 8).unsigned_abs() as usize);
        assert_eq!(valid, expected_valid);
    }
}

#[test]
fn accumulate_fixtures() {
    let a = random_grid(3, 3, 4, 1);
    let b = random_grid(3, 3, 4, 2);
    let all = vec![true; 9];
    let single = accumulate_mean(&[(a.clone(), all.clone())]).unwrap();
    assert_eq!(single.values(), a.values());
    assert!(single.coverage().unwrap().iter().all(|&c| c == 1));

    let pair = accumulate_mean(&[(a.clone(), all.clone()), (b.clone(), all.clone())]).unwrap();
    for ((m, x), y) in pair.values().iter().zip(a.values()).zip(b.values()) {
        assert!((m - (x + y) / 2.0).abs() < 1e-7);
    }

    // Location 0 is covered by views 1 and 3 only.
    let views: Vec<(FeatureGrid<f32>, Vec<bool>)> = (0..4)
        .map(|i| {
            let mut mask = vec![true; 9];
            mask[0] = i == 1 || i == 3;
            (random_grid(3, 3, 4, 10 + i), mask)
        })
        .collect();
    let mean = accumulate_mean(&views).unwrap();
    for k in 0..4 {
        let want = (views[1].0.token(0, 0)[k] + views[3].0.token(0, 0)[k]) / 2.0;
        assert!((mean.token(0, 0)[k] - want).abs() < 1e-7);
    }
    assert_eq!(mean.coverage().unwrap()[0], 2);
}

#[test]
fn uncovered_location_is_rejected() {
    let mut mask = vec![true; 4];
    mask[2] = false;
    let err = accumulate_mean(&[(random_grid(2, 2, 3, 0), mask)]).unwrap_err();
    assert!(matches!(err, Error::Uncovered { row: 1, col: 0 }));
    assert!(accumulate_mean::<f32>(&[]).is_err());
}

#[test]
fn single_view_denoise_is_raw_teacher_output() {
    let teacher = mean_color_teacher(8);
    let img = ramp_image(32, 48);
    let cfg = DenoiseConfig { n_augmentations: 1, ..Default::default() };
    let out = denoise(&teacher, &img, 8, &cfg, &mut rng::stream(0, "aug")).unwrap();
    let raw = teacher(&img).unwrap();
    assert_eq!(out.values(), raw.values());
}

#[test]
fn equivariant_teacher_is_a_fixed_point() {
    let k = 8;
    let teacher = mean_color_teacher(k);
    let img = ramp_image(64, 64);
    let raw = teacher(&img).unwrap();
    for seed in 0..5 {
        let cfg = DenoiseConfig { n_augmentations: 10, ..Default::default() };
        let out = denoise(&teacher, &img, k, &cfg, &mut rng::stream(seed, "aug")).unwrap();
        for (a, b) in out.values().iter().zip(raw.values()) {
            assert!((a - b).abs() < 1e-5);
        }
        let cov = out.coverage().unwrap();
        assert_eq!(*cov.iter().min().unwrap(), 1.max(*cov.iter().min().unwrap()));
        assert!(*cov.iter().max().unwrap() <= 10);
    }
}

#[test]
fn external_views_match_in_process_denoise() {
    let k = 8;
    let teacher = mean_color_teacher(k);
    let img = ramp_image(64, 64);
    let params = sample_aug_params(&mut rng::stream(4, "aug"), 6, 0.15, 0.5, k, (64, 64)).unwrap();
    let base = CoordGrid::identity(8, 8);
    let views: Vec<_> = params
        .iter()
        .map(|t| teacher(&transform(&img, &base, t, k, PadMode::MeanColor).unwrap().0).unwrap())
        .collect();
    let a = denoise_views(&views, &params, k, Summation::Sequential).unwrap();
    let b = denoise_with_params(&teacher, &img, &params, k, PadMode::MeanColor, Summation::Sequential).unwrap();
    assert_eq!(a, b);
    assert!(denoise_views(&views[..2], &params, k, Summation::Sequential).is_err());
}

/// Explicit per-location arithmetic mean.
fn brute_force_mean(views: &[(FeatureGrid<f32>, Vec<bool>)]) -> Vec<f64> {
    let g = &views[0].0;
    let d = g.dim();
    let mut out = vec![0.0; g.len() * d];
    for cell in 0..g.len() {
        let contributors: Vec<&FeatureGrid<f32>> = views.iter().filter(|(_, m)| m[cell]).map(|(v, _)| v).collect();
        for k in 0..d {
            let s: f64 = contributors.iter().map(|v| f64::from(v.values()[cell * d + k])).sum();
            out[cell * d + k] = s / contributors.len() as f64;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streaming_mean_equals_brute_force(rows in 1usize..=8, cols in 1usize..=8, dim in 1usize..=16, n in 1usize..=12, seed in 0u64..1000) {
        let mut r = rng::stream(seed, "masks");
        let views: Vec<_> = (0..n).map(|i| {
            let mask: Vec<bool> = (0..rows * cols).map(|_| i == 0 || r.gen_bool(0.6)).collect();
            (random_grid(rows, cols, dim, seed * 31 + i as u64), mask)
        }).collect();
        let fast = accumulate_mean(&views).unwrap();
        let slow = brute_force_mean(&views);
        for (a, b) in fast.values().iter().zip(&slow) {
            prop_assert!((f64::from(*a) - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        let kahan = accumulate_mean_with(&views, Summation::Compensated).unwrap();
        for (a, b) in kahan.values().iter().zip(fast.values()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn identity_first_guarantees_coverage(n in 1usize..=12, seed in 0u64..500) {
        let teacher = mean_color_teacher(8);
        let img = ramp_image(64, 64);
        let cfg = DenoiseConfig { n_augmentations: n, ..Default::default() };
        let out = denoise(&teacher, &img, 8, &cfg, &mut rng::stream(seed, "aug")).unwrap();
        let cov = out.coverage().unwrap();
        prop_assert!(*cov.iter().min().unwrap() >= 1);
        prop_assert!(*cov.iter().max().unwrap() as usize <= n);
    }
}
