mod common;

use candle_core::{Device, Tensor};
use fieldsam_core::lora::{init_pair, lora_forward, merge, LoraPair, LoraSpec, LoraTarget};
use fieldsam_core::segmenter::{DecoderMode, FinetuneMode, ModelConfig, Segmenter};
use fieldsam_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn mat(v: &[f32], r: usize, c: usize) -> Tensor {
    Tensor::from_slice(v, (r, c), &Device::Cpu).unwrap()
}

/// Row-major `(r x n) * (n x c)` with plain loops in f64.
fn naive_matmul(a: &[f32], b: &[f32], r: usize, n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0f64; r * c];
    for i in 0..r {
        for j in 0..c {
            for t in 0..n {
                out[i * c + j] += a[i * n + t] as f64 * b[t * c + j] as f64;
            }
        }
    }
    out
}

#[test]
fn forward_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, k, r) = (4, 3, 2);
    let w0 = rand_vec(&mut rng, d * k);
    let a = rand_vec(&mut rng, r * k);
    let b = rand_vec(&mut rng, d * r);
    let x = rand_vec(&mut rng, k);
    let ba = naive_matmul(&b, &a, d, r, k);
    let expected: Vec<f64> = (0..d)
        .map(|i| (0..k).map(|j| (w0[i * k + j] as f64 + ba[i * k + j]) * x[j] as f64).sum())
        .collect();
    let pair = LoraPair::new(mat(&a, r, k), mat(&b, d, r)).unwrap();
    let xt = Tensor::from_slice(&x, k, &Device::Cpu).unwrap();
    let got: Vec<f32> = lora_forward(&xt, &mat(&w0, d, k), &pair, 1.0).unwrap().to_vec1().unwrap();
    for (g, e) in got.iter().zip(&expected) {
        assert!((*g as f64 - e).abs() < 1e-6, "{g} vs {e}");
    }
}

#[test]
fn identity_with_zero_pair() {
    let w0 = Tensor::eye(3, candle_core::DType::F32, &Device::Cpu).unwrap();
    let pair = LoraPair::new(mat(&[0.0; 3], 1, 3), mat(&[0.0; 3], 3, 1)).unwrap();
    let x = Tensor::new(&[1f32, 2., 3.], &Device::Cpu).unwrap();
    let y: Vec<f32> = lora_forward(&x, &w0, &pair, 1.0).unwrap().to_vec1().unwrap();
    assert_eq!(y, vec![1., 2., 3.]);
}

#[test]
fn thousand_random_merge_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0f32;
    for _ in 0..1000 {
        let d = rng.random_range(2..12);
        let k = rng.random_range(2..12);
        let r = rng.random_range(1..d.min(k));
        let s = rng.random_range(0.25f64..2.0);
        let w0 = mat(&rand_vec(&mut rng, d * k), d, k);
        let pair = LoraPair::new(mat(&rand_vec(&mut rng, r * k), r, k), mat(&rand_vec(&mut rng, d * r), d, r)).unwrap();
        let x = Tensor::from_vec(rand_vec(&mut rng, 3 * k), (3, k), &Device::Cpu).unwrap();
        let adapted = lora_forward(&x, &w0, &pair, s).unwrap();
        let merged = x.matmul(&merge(&w0, &pair, s).unwrap().t().unwrap()).unwrap();
        worst = worst.max(common::max_abs_diff(&adapted, &merged));
    }
    assert!(worst < 1e-5, "max deviation {worst}");
}

proptest! {
    #[test]
    fn merge_equals_adapter_path(seed in any::<u64>(), s in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, k, r) = (6, 5, 2);
        let w0 = mat(&rand_vec(&mut rng, d * k), d, k);
        let pair = LoraPair::new(mat(&rand_vec(&mut rng, r * k), r, k), mat(&rand_vec(&mut rng, d * r), d, r)).unwrap();
        let x = Tensor::from_vec(rand_vec(&mut rng, k), k, &Device::Cpu).unwrap();
        let adapted = lora_forward(&x, &w0, &pair, s).unwrap();
        let merged = merge(&w0, &pair, s).unwrap().matmul(&x.unsqueeze(1).unwrap()).unwrap().squeeze(1).unwrap();
        prop_assert!(common::max_abs_diff(&adapted, &merged) < 1e-5);
    }

    #[test]
    fn fresh_pair_has_zero_delta(seed in any::<u64>(), d in 2usize..16, k in 2usize..16) {
        let r = 1.max(d.min(k) - 1);
        prop_assume!(r < d.min(k));
        let pair = init_pair((d, k), r, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let delta: f32 = pair.delta().unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        prop_assert_eq!(delta, 0.0);
        prop_assert_eq!(pair.base_shape(), (d, k));
    }
}

#[test]
fn paper_shape_convention() {
    let p = init_pair((768, 768), 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(p.a.dims(), &[8, 768]);
    assert_eq!(p.b.dims(), &[768, 8]);
}

#[test]
fn adapted_tiny_model_matches_base_before_training() {
    for mode in [DecoderMode::Frozen, DecoderMode::Full, DecoderMode::Lora] {
        let base = Segmenter::new(ModelConfig::tiny(), 5).unwrap();
        let mut adapted = Segmenter::new(ModelConfig::tiny(), 5).unwrap();
        let fm = FinetuneMode::new(mode);
        adapted.configure_finetune(fm, &fm.lora_spec(4)).unwrap();
        assert!(adapted.has_adapters());
        let img = common::random_image(1);
        let prompts = fieldsam_core::prompting::grid_prompts(64, 3).unwrap().split_points();
        let a = base.predict(&img, &prompts).unwrap();
        let b = adapted.predict(&img, &prompts).unwrap();
        assert!(common::max_abs_diff(&a.masks, &b.masks) <= 1e-6, "{mode}");
        assert!(common::max_abs_diff(&a.iou_scores, &b.iou_scores) <= 1e-6, "{mode}");
    }
}

#[test]
fn vit_b_encoder_gets_24_pairs() {
    let mut m = Segmenter::zeroed(ModelConfig::vit_b()).unwrap();
    let mode = FinetuneMode::new(DecoderMode::Frozen);
    m.configure_finetune(mode, &LoraSpec::encoder_qv(8)).unwrap();
    let adapted = &m.finetune().unwrap().adapted;
    assert_eq!(adapted.len(), 24);
    assert!(adapted.iter().all(|n| n.starts_with("encoder.") && (n.ends_with(".q") || n.ends_with(".v"))));
    let pairs = m.params().iter().filter(|p| p.name().ends_with(".lora_a")).count();
    assert_eq!(pairs, 24);
}

#[test]
fn tiny_lora_pair_count_and_arithmetic() {
    let cfg = ModelConfig::tiny();
    let mut m = Segmenter::zeroed(cfg.clone()).unwrap();
    let mode = FinetuneMode::new(DecoderMode::Frozen);
    m.configure_finetune(mode, &LoraSpec::encoder_qv(4)).unwrap();
    let c = cfg.encoder_width;
    assert_eq!(m.count_trainable(), cfg.encoder_blocks * 2 * 4 * (c + c));
}

#[test]
fn double_configuration_is_rejected() {
    let mut m = Segmenter::zeroed(ModelConfig::tiny()).unwrap();
    let mode = FinetuneMode::new(DecoderMode::Lora);
    m.configure_finetune(mode, &mode.lora_spec(2)).unwrap();
    let before = m.params().len();
    assert!(m.configure_finetune(mode, &mode.lora_spec(2)).is_err());
    assert_eq!(m.params().len(), before);
}

#[test]
fn frozen_decoder_without_encoder_targets_is_rejected() {
    let mut m = Segmenter::zeroed(ModelConfig::tiny()).unwrap();
    let spec = LoraSpec::new(2, []);
    assert!(matches!(
        m.configure_finetune(FinetuneMode::new(DecoderMode::Frozen), &spec),
        Err(Error::Config(_))
    ));
}

#[test]
fn decoder_targets_need_lora_mode() {
    let mut m = Segmenter::zeroed(ModelConfig::tiny()).unwrap();
    let spec = LoraSpec::new(2, [LoraTarget::EncoderQ, LoraTarget::DecoderV]);
    assert!(m.configure_finetune(FinetuneMode::new(DecoderMode::Frozen), &spec).is_err());
}

#[test]
fn oversized_rank_is_rejected() {
    let mut m = Segmenter::zeroed(ModelConfig::tiny()).unwrap();
    let mode = FinetuneMode::new(DecoderMode::Frozen);
    assert!(m.configure_finetune(mode, &LoraSpec::encoder_qv(32)).is_err());
}

#[test]
fn merged_model_matches_adapted_model() {
    let mut m = Segmenter::new(ModelConfig::tiny(), 3).unwrap();
    let mode = FinetuneMode::new(DecoderMode::Lora);
    m.configure_finetune(mode, &mode.lora_spec(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in m.params().iter().filter(|p| p.name().ends_with(".lora_b")) {
        let v: Vec<f32> = (0..p.elem_count()).map(|_| rng.random_range(-0.05f32..0.05)).collect();
        p.assign(&Tensor::from_vec(v, p.dims(), &Device::Cpu).unwrap()).unwrap();
    }
    let img = common::random_image(2);
    let prompts = fieldsam_core::prompting::grid_prompts(64, 2).unwrap().split_points();
    let before = m.predict(&img, &prompts).unwrap();
    let merged = m.merge_adapters().unwrap();
    assert!(!merged.is_empty());
    assert!(!m.has_adapters());
    assert!(m.params().iter().all(|p| !p.name().contains(".lora_")));
    let after = m.predict(&img, &prompts).unwrap();
    assert!(common::max_abs_diff(&before.low_res, &after.low_res) < 1e-4);
}
