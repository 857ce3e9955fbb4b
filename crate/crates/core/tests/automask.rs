mod common;

use fieldsam_core::automask::{
    candidates, generate, mask_nms, sort_by_score, AutomaskConfig, GeoRef, PredictedInstance, TilePrediction,
};
use fieldsam_core::prompting::PromptPoint;
use fieldsam_core::segmenter::{ModelConfig, Segmenter};
use fieldsam_core::BinaryMask;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inst(mask: BinaryMask, score: f64) -> PredictedInstance {
    PredictedInstance {
        mask,
        score,
        source_prompt: PromptPoint::positive(0.0, 0.0),
    }
}

fn overlap(a: &[bool], b: &[bool]) -> f64 {
    let i = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let u = a.iter().zip(b).filter(|(x, y)| **x || **y).count() as f64;
    if u == 0.0 {
        1.0
    } else {
        i / u
    }
}

/// Index `i` is kept iff no kept index `j < i` overlaps it at `thresh` or more.
fn nms_oracle(masks: &[Vec<bool>], thresh: f64) -> Vec<usize> {
    let mut kept = vec![false; masks.len()];
    for i in 0..masks.len() {
        kept[i] = (0..i).all(|j| !kept[j] || overlap(&masks[i], &masks[j]) < thresh);
    }
    (0..masks.len()).filter(|&i| kept[i]).collect()
}

fn random_masks(rng: &mut ChaCha8Rng, n: usize) -> Vec<BinaryMask> {
    (0..n)
        .map(|_| {
            let (x0, y0) = (rng.random_range(0..6), rng.random_range(0..6));
            let (x1, y1) = (rng.random_range(x0 + 1..=8), rng.random_range(y0 + 1..=8));
            BinaryMask::from_fn(8, 8, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
        })
        .collect()
}

fn sorted_instances(rng: &mut ChaCha8Rng, n: usize) -> Vec<PredictedInstance> {
    let mut scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    random_masks(rng, n).into_iter().zip(scores).map(|(m, s)| inst(m, s)).collect()
}

#[test]
fn nms_matches_oracle_on_1000_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let items = sorted_instances(&mut rng, 6);
        let thresh = rng.random_range(0.1..0.9);
        let bools: Vec<Vec<bool>> = items.iter().map(|i| i.mask.to_bools()).collect();
        let expected: Vec<Vec<bool>> = nms_oracle(&bools, thresh).into_iter().map(|i| bools[i].clone()).collect();
        let got: Vec<Vec<bool>> = mask_nms(items, thresh).unwrap().iter().map(|i| i.mask.to_bools()).collect();
        assert_eq!(got, expected);
    }
}

#[test]
fn nms_examples() {
    let a = BinaryMask::from_fn(8, 8, |x, y| x < 6 && y < 6);
    let single = mask_nms(vec![inst(a.clone(), 0.5)], 0.7).unwrap();
    assert_eq!(single.len(), 1);

    let twins = mask_nms(vec![inst(a.clone(), 0.9), inst(a.clone(), 0.8)], 0.5).unwrap();
    assert_eq!(twins.len(), 1);
    assert_eq!(twins[0].score, 0.9);

    let b = BinaryMask::from_fn(8, 8, |x, y| x < 6 && y < 5);
    let c = BinaryMask::from_fn(8, 8, |x, y| x < 5 && y < 5);
    let chain = mask_nms(vec![inst(a.clone(), 0.9), inst(b, 0.8), inst(c, 0.7)], 0.6).unwrap();
    assert_eq!(chain.len(), 1);
    assert_eq!(chain[0].mask, a);

    let distinct: Vec<_> = (0..4)
        .map(|k| inst(BinaryMask::from_fn(8, 8, move |x, _| x / 2 == k), 1.0 - k as f64 * 0.1))
        .collect();
    assert_eq!(mask_nms(distinct, 1.0).unwrap().len(), 4);

    assert!(mask_nms(vec![inst(a.clone(), 0.1), inst(a, 0.2)], 0.5).is_err());
}

#[test]
fn sort_is_stable() {
    let m = |k: usize| BinaryMask::from_fn(4, 4, move |x, _| x == k);
    let mut v = vec![inst(m(0), 0.5), inst(m(1), 0.9), inst(m(2), 0.5), inst(m(3), 0.9)];
    sort_by_score(&mut v);
    let order: Vec<_> = v.iter().map(|i| i.mask.foreground()[0].0).collect();
    assert_eq!(order, vec![1, 3, 0, 2]);
}

proptest! {
    #[test]
    fn nms_output_is_pairwise_below_threshold(seed in any::<u64>(), thresh in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kept = mask_nms(sorted_instances(&mut rng, 8), thresh).unwrap();
        for i in 0..kept.len() {
            for j in 0..i {
                prop_assert!(overlap(&kept[i].mask.to_bools(), &kept[j].mask.to_bools()) < thresh);
            }
        }
    }
}

fn model() -> Segmenter {
    Segmenter::new(ModelConfig::tiny(), 3).unwrap()
}

fn open_cfg() -> AutomaskConfig {
    AutomaskConfig {
        grid_n: 8,
        conf_thresh: -1.0,
        nms_iou: 0.7,
        points_per_batch: 16,
    }
}

#[test]
fn impossible_confidence_yields_nothing() {
    let cfg = AutomaskConfig {
        conf_thresh: 1.01,
        ..open_cfg()
    };
    assert!(generate(&model(), &common::random_image(0), &cfg).unwrap().is_empty());
}

#[test]
fn raising_confidence_never_adds_outputs() {
    let m = model();
    let img = common::random_image(1);
    let cands = candidates(&m, &img, &open_cfg()).unwrap();
    assert!(!cands.is_empty());
    let mut scores: Vec<f64> = cands.iter().map(|c| c.score).collect();
    scores.sort_by(|a, b| a.total_cmp(b));
    let mut last = usize::MAX;
    for q in [0, scores.len() / 4, scores.len() / 2, 3 * scores.len() / 4, scores.len() - 1] {
        let cfg = AutomaskConfig {
            conf_thresh: scores[q],
            ..open_cfg()
        };
        let n = generate(&m, &img, &cfg).unwrap().len();
        assert!(n <= last, "{n} > {last}");
        last = n;
    }
}

#[test]
fn generation_is_deterministic_and_well_formed() {
    let img = common::random_image(2);
    let a = generate(&model(), &img, &open_cfg()).unwrap();
    let b = generate(&model(), &img, &open_cfg()).unwrap();
    assert_eq!(a, b);
    assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(a.iter().all(|i| !i.mask.is_empty() && i.mask.shape() == (64, 64)));
    for i in 0..a.len() {
        for j in 0..i {
            assert!(overlap(&a[i].mask.to_bools(), &a[j].mask.to_bools()) < 0.7);
        }
    }
}

#[test]
fn batch_size_does_not_change_candidates() {
    let m = model();
    let img = common::random_image(3);
    let reference = candidates(&m, &img, &AutomaskConfig { points_per_batch: 64, ..open_cfg() }).unwrap();
    for ppb in [1, 7, 13] {
        let got = candidates(&m, &img, &AutomaskConfig { points_per_batch: ppb, ..open_cfg() }).unwrap();
        assert_eq!(got.len(), reference.len(), "points_per_batch {ppb}");
        for (g, r) in got.iter().zip(&reference) {
            assert_eq!(g.source_prompt, r.source_prompt);
            assert!((g.score - r.score).abs() < 1e-5);
            assert!(overlap(&g.mask.to_bools(), &r.mask.to_bools()) > 0.99);
        }
    }
}

#[test]
fn invalid_configuration_is_rejected() {
    let img = common::random_image(0);
    for cfg in [
        AutomaskConfig { grid_n: 0, ..open_cfg() },
        AutomaskConfig { points_per_batch: 0, ..open_cfg() },
        AutomaskConfig { nms_iou: f64::NAN, ..open_cfg() },
    ] {
        assert!(generate(&model(), &img, &cfg).is_err());
    }
}

#[test]
fn tile_prediction_round_trip() {
    let preds = generate(&model(), &common::random_image(4), &open_cfg()).unwrap();
    let georef = GeoRef {
        origin_x: 500_000.0,
        origin_y: 5_800_000.0,
        pixel_size: 2.5,
        epsg: Some(32632),
    };
    let tile = TilePrediction::new("t-0001", (64, 64), Some(georef), &preds);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t-0001.json");
    tile.write(&path).unwrap();
    let back = TilePrediction::read(&path).unwrap();
    assert_eq!(back, tile);
    let masks = back.masks().unwrap();
    assert_eq!(masks.len(), preds.len());
    for ((m, p), rec) in masks.iter().zip(&preds).zip(&back.instances) {
        assert_eq!(m, &p.mask);
        assert_eq!(rec.area, p.mask.count());
        assert_eq!(rec.score, p.score);
    }
}
