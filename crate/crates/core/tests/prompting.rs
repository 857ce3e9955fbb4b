use std::collections::HashSet;

use fieldsam_core::prompting::{
    grid_prompts, sample_multi, sample_single_positive, BandConfig, Fallback, MultiConfig, PointLabel,
};
use fieldsam_core::BinaryMask;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pixel(x: f32, y: f32) -> (usize, usize) {
    (x as usize, y as usize)
}

/// Smallest Euclidean distance from `(x, y)` to a pixel whose value differs.
fn brute_boundary_distance(mask: &BinaryMask, x: usize, y: usize) -> f64 {
    let own = mask.get(x, y);
    let mut best = f64::INFINITY;
    for yy in 0..mask.height() {
        for xx in 0..mask.width() {
            if mask.get(xx, yy) != own {
                let d = ((xx as f64 - x as f64).powi(2) + (yy as f64 - y as f64).powi(2)).sqrt();
                best = best.min(d);
            }
        }
    }
    best
}

#[test]
fn single_pixel_mask_is_always_chosen() {
    let mask = BinaryMask::from_fn(9, 7, |x, y| x == 6 && y == 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let p = sample_single_positive(&mask, &mut rng).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.points[0].label, PointLabel::Positive);
        assert_eq!(pixel(p.points[0].x, p.points[0].y), (6, 2));
    }
}

#[test]
fn empty_mask_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_single_positive(&BinaryMask::new(4, 4), &mut rng).is_err());
    assert!(sample_multi(&BinaryMask::new(4, 4), &MultiConfig::default(), &mut rng).is_err());
}

#[test]
fn single_positive_is_uniform_over_square() {
    let mask = BinaryMask::from_fn(32, 32, |x, y| (5..15).contains(&x) && (11..21).contains(&y));
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts = vec![0usize; 100];
    let draws = 10_000;
    for _ in 0..draws {
        let p = sample_single_positive(&mask, &mut rng).unwrap();
        let (x, y) = pixel(p.points[0].x, p.points[0].y);
        assert!(mask.get(x, y));
        counts[(y - 11) * 10 + (x - 5)] += 1;
    }
    let expected = draws as f64 / 100.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Upper 1% point of chi-square with 99 degrees of freedom.
    assert!(chi2 < 134.642, "chi2 = {chi2}");
}

#[test]
fn multi_on_square_stays_in_band() {
    let mask = BinaryMask::from_fn(64, 64, |x, y| (20..40).contains(&x) && (22..42).contains(&y));
    let cfg = MultiConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let s = sample_multi(&mask, &cfg, &mut rng).unwrap();
        assert!(s.fallbacks.is_empty());
        assert_eq!(s.band_width, 2.0);
        let pos: Vec<_> = s.prompt.points.iter().filter(|p| p.label == PointLabel::Positive).collect();
        let neg: Vec<_> = s.prompt.points.iter().filter(|p| p.label == PointLabel::Negative).collect();
        assert_eq!((pos.len(), neg.len()), (4, 2));
        for p in pos {
            let (x, y) = pixel(p.x, p.y);
            assert!(mask.get(x, y));
            assert!(brute_boundary_distance(&mask, x, y) <= s.band_width);
        }
        for p in neg {
            let (x, y) = pixel(p.x, p.y);
            assert!(!mask.get(x, y));
            assert!(brute_boundary_distance(&mask, x, y) <= s.band_width);
        }
        let distinct: HashSet<_> = s.prompt.points.iter().map(|p| pixel(p.x, p.y)).collect();
        assert_eq!(distinct.len(), 6);
    }
}

#[test]
fn tiny_mask_falls_back_to_replacement() {
    let mask = BinaryMask::from_fn(16, 16, |x, y| y == 3 && (4..7).contains(&x));
    let s = sample_multi(&mask, &MultiConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(s.prompt.points.iter().filter(|p| p.label == PointLabel::Positive).count(), 4);
    assert!(s.fallbacks.contains(&Fallback::PositivesWithReplacement));
    for p in &s.prompt.points {
        let (x, y) = pixel(p.x, p.y);
        assert_eq!(mask.get(x, y), p.label == PointLabel::Positive);
    }
}

#[test]
fn degenerate_configurations_are_rejected() {
    let mask = BinaryMask::from_fn(16, 16, |x, _| x < 8);
    let zero_band = MultiConfig {
        band: BandConfig {
            min_width: 0.0,
            relative_width: 0.0,
        },
        ..MultiConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_multi(&mask, &zero_band, &mut rng).is_err());
    let full = BinaryMask::from_fn(16, 16, |_, _| true);
    assert!(sample_multi(&full, &MultiConfig::default(), &mut rng).is_err());
}

#[test]
fn labels_agree_with_masks_over_many_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cfg = MultiConfig::default();
    let mut checked = 0;
    while checked < 10_000 {
        let density = rng.random_range(0.05..0.95);
        let mask = BinaryMask::from_fn(12, 12, |_, _| rng.random_bool(density));
        if mask.is_empty() || mask.count() == 144 {
            continue;
        }
        let single = sample_single_positive(&mask, &mut rng).unwrap();
        let p = single.points[0];
        assert!(mask.get(p.x as usize, p.y as usize));
        let multi = sample_multi(&mask, &cfg, &mut rng).unwrap();
        for p in &multi.prompt.points {
            assert_eq!(mask.get(p.x as usize, p.y as usize), p.label == PointLabel::Positive);
        }
        checked += 1;
    }
}

#[test]
fn sampling_is_deterministic() {
    let mask = BinaryMask::from_fn(30, 30, |x, y| (x * 7 + y * 3) % 11 < 5);
    let a = sample_multi(&mask, &MultiConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = sample_multi(&mask, &MultiConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn grid_examples() {
    assert_eq!(grid_prompts(1024, 32).unwrap().len(), 1024);
    let one = grid_prompts(1024, 1).unwrap();
    assert_eq!((one.points[0].x, one.points[0].y), (512.0, 512.0));
    let two: Vec<(f32, f32)> = grid_prompts(4, 2).unwrap().points.iter().map(|p| (p.x, p.y)).collect();
    assert_eq!(two, vec![(1.0, 1.0), (3.0, 1.0), (1.0, 3.0), (3.0, 3.0)]);
    assert!(grid_prompts(64, 0).is_err());
}

proptest! {
    #[test]
    fn grid_points_are_distinct_positive_and_in_bounds(size in 1usize..2048, n in 1usize..48) {
        let g = grid_prompts(size, n).unwrap();
        prop_assert_eq!(g.len(), n * n);
        let mut seen = HashSet::new();
        for p in &g.points {
            prop_assert_eq!(p.label, PointLabel::Positive);
            prop_assert!(p.x >= 0.0 && p.x < size as f32 && p.y >= 0.0 && p.y < size as f32);
            seen.insert((p.x.to_bits(), p.y.to_bits()));
        }
        prop_assert_eq!(seen.len(), n * n);
    }

    #[test]
    fn single_positive_lands_on_foreground(bits in proptest::collection::vec(any::<bool>(), 64), seed in any::<u64>()) {
        let mask = BinaryMask::from_bools(8, 8, &bits).unwrap();
        prop_assume!(!mask.is_empty());
        let p = sample_single_positive(&mask, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().points[0];
        prop_assert!(mask.get(p.x as usize, p.y as usize));
    }
}
