use pretext::imaging::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image_strategy() -> impl Strategy<Value = Image> {
    (1usize..12, 1usize..12, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(0.0f32..=1.0, h * w * c).prop_map(move |px| Image::new(h, w, c, px).unwrap())
    })
}

#[test]
fn permutation_table_for_nine_cells() {
    let t = build_permutation_set(9, 24, 0).unwrap();
    assert_eq!(t.perms.len(), 24);
    assert_eq!(t.perms[0], (0..9).collect::<Vec<_>>());
    let mut sorted = t.perms.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 24);
    assert_eq!(t.scan_min_hamming(), t.min_pairwise_hamming);
    assert!(t.min_pairwise_hamming >= 7, "{}", t.min_pairwise_hamming);
    assert_eq!(build_permutation_set(9, 24, 0).unwrap(), t);
}

/// Greedy selection on 3 items recomputed from scratch over all 6 orders.
#[test]
fn three_item_table_matches_brute_force() {
    let all = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for count in 1..=6 {
        let mut chosen: Vec<[usize; 3]> = vec![all[0]];
        while chosen.len() < count {
            let mut best: Option<([usize; 3], usize)> = None;
            for cand in all {
                if chosen.contains(&cand) {
                    continue;
                }
                let d = chosen.iter().map(|c| hamming(c, &cand)).min().unwrap();
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((cand, d));
                }
            }
            chosen.push(best.unwrap().0);
        }
        let table = build_permutation_set(3, count, 0).unwrap();
        let want: Vec<Vec<usize>> = chosen.iter().map(|c| c.to_vec()).collect();
        assert_eq!(table.perms, want, "count {count}");
    }
}

#[test]
fn lab_round_trip_over_lattice() {
    let mut worst = 0.0f64;
    for r in 0..16 {
        for g in 0..16 {
            for b in 0..16 {
                let rgb = [r as f64 / 15.0, g as f64 / 15.0, b as f64 / 15.0];
                let back = lab_to_rgb_pixel(rgb_to_lab_pixel(rgb));
                for c in 0..3 {
                    worst = worst.max((back[c] - rgb[c]).abs());
                }
            }
        }
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn lab_image_round_trip_and_neutral_axis() {
    let px: Vec<f32> = (0..4 * 4 * 3).map(|i| (i % 17) as f32 / 16.0).collect();
    let img = Image::new(4, 4, 3, px).unwrap();
    let back = lab_to_rgb(&rgb_to_lab(&img).unwrap());
    for (a, b) in img.pixels().iter().zip(back.pixels()) {
        assert!((a - b).abs() < 1e-3);
    }
    for v in 0..=20 {
        let lab = rgb_to_lab_pixel([v as f64 / 20.0; 3]);
        assert!(lab[1].abs() < 0.1 && lab[2].abs() < 0.1);
    }
    assert!(rgb_to_lab(&Image::filled(2, 2, 1, 0.5).unwrap()).is_err());
}

proptest! {
    #[test]
    fn augmentations_preserve_range_and_shape(img in image_strategy(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_range = |i: &Image| i.pixels().iter().all(|v| (0.0..=1.0).contains(v));
        let shape = |i: &Image| (i.height(), i.width(), i.channels());
        let out = color_jitter(&img, 0.4, 0.4, 0.4, &mut rng);
        prop_assert!(in_range(&out) && shape(&out) == shape(&img));
        let out = stochastic_flip_gray(&img, 0.5, 0.5, &mut rng);
        prop_assert!(in_range(&out) && shape(&out) == shape(&img));
        let out = gaussian_noise(&img, 0.3, &mut rng);
        prop_assert!(in_range(&out) && shape(&out) == shape(&img));
        let out = random_resized_crop(&img, (0.3, 1.0), (0.75, 4.0 / 3.0), 9, &mut rng).unwrap();
        prop_assert!(in_range(&out) && shape(&out) == (9, 9, img.channels()));
        let fill = vec![0.5; img.channels()];
        let (out, mask) = erase_rects(&img, (1, 4), (0.1, 0.3), &fill, &mut rng).unwrap();
        prop_assert!(in_range(&out) && mask.len() == img.height() * img.width());
    }

    #[test]
    fn rotation_is_cyclic(img in image_strategy(), k in -8i64..8, j in -8i64..8) {
        prop_assert_eq!(rotate90(&img, k), rotate90(&img, k + 4));
        prop_assert_eq!(rotate90(&rotate90(&img, k), j), rotate90(&img, k + j));
    }

    #[test]
    fn stochastic_ops_are_pure_in_the_seed(img in image_strategy(), seed in 0u64..1000) {
        let spec = AugSpec { steps: vec![
            AugStep::ResizedCrop { scale: (0.3, 1.0), ratio: (0.75, 4.0 / 3.0), size: 6 },
            AugStep::ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.4 },
            AugStep::FlipGray { p_flip: 0.5, p_gray: 0.25 },
            AugStep::Noise { sigma: 0.1 },
        ]};
        prop_assert_eq!(spec.apply_seeded(&img, seed).unwrap(), spec.apply_seeded(&img, seed).unwrap());
    }

    #[test]
    fn ppm_round_trip_is_byte_exact(h in 1usize..6, w in 1usize..6, bytes in prop::collection::vec(any::<u8>(), 75)) {
        let mut file = format!("P6\n{w} {h}\n255\n").into_bytes();
        file.extend_from_slice(&bytes[..h * w * 3]);
        let img = decode_ppm(&file).unwrap();
        prop_assert_eq!(encode_ppm(&img).unwrap(), file);
    }
}
