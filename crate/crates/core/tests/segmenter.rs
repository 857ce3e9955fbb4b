mod common;

use candle_core::{Device, Tensor};
use fieldsam_core::prompting::{PromptPoint, PromptSet};
use fieldsam_core::segmenter::{DecoderMode, FinetuneMode, ModelConfig, Segmenter};

fn configured(cfg: ModelConfig, decoder: DecoderMode, rank: usize) -> Segmenter {
    let mut m = Segmenter::zeroed(cfg).unwrap();
    let mode = FinetuneMode::new(decoder);
    m.configure_finetune(mode, &mode.lora_spec(rank)).unwrap();
    m
}

fn within(got: usize, target: f64, tol: f64) -> bool {
    ((got as f64 - target) / target).abs() <= tol
}

#[test]
fn vit_b_trainable_counts_follow_table_two() {
    let frozen8 = configured(ModelConfig::vit_b(), DecoderMode::Frozen, 8);
    assert_eq!(frozen8.count_trainable(), 294_912);
    assert_eq!(frozen8.count_trainable(), 12 * 2 * 2 * 8 * 768);
    assert_eq!(frozen8.count_by_component().mask_decoder, 0);
    assert_eq!(frozen8.count_by_component().prompt_encoder, 0);

    let frozen32 = configured(ModelConfig::vit_b(), DecoderMode::Frozen, 32);
    assert_eq!(frozen32.count_trainable(), 1_179_648);

    let lora8 = configured(ModelConfig::vit_b(), DecoderMode::Lora, 8);
    let c = lora8.count_by_component();
    assert_eq!(c.image_encoder, 294_912);
    assert!(within(c.mask_decoder, 48_000.0, 0.05), "decoder adds {}", c.mask_decoder);
    assert!(within(lora8.count_trainable(), 342_000.0, 0.02), "{}", lora8.count_trainable());

    let lora32 = configured(ModelConfig::vit_b(), DecoderMode::Lora, 32);
    assert!(within(lora32.count_trainable(), 1_400_000.0, 0.05), "{}", lora32.count_trainable());

    let full8 = configured(ModelConfig::vit_b(), DecoderMode::Full, 8);
    assert!(within(full8.count_trainable(), 4_200_000.0, 0.05), "{}", full8.count_trainable());
    assert_eq!(full8.count_by_component().prompt_encoder, 0);
}

#[test]
fn vit_b_decoder_lora_count_by_hand() {
    // Decoder width 256, cross-attention inner width 128, two blocks.
    let r = 8;
    let self_attn = 2 * r * (256 + 256);
    let cross = 2 * r * (256 + 128);
    let block = self_attn + 2 * cross;
    let final_attn = cross;
    let m = configured(ModelConfig::vit_b(), DecoderMode::Lora, r);
    assert_eq!(m.count_by_component().mask_decoder, 2 * block + final_attn);
}

#[test]
fn token_grid_shapes() {
    assert_eq!(ModelConfig::vit_b().token_grid_shape(), (64, 64, 768));
    let cfg = ModelConfig::tiny();
    let m = Segmenter::new(cfg.clone(), 1).unwrap();
    let t = m.encode_image(&common::random_image(0)).unwrap();
    assert_eq!(t.grid_shape(), cfg.token_grid_shape());
    assert_eq!(t.grid_shape(), (8, 8, 32));
}

#[test]
fn encoding_is_deterministic() {
    let m = Segmenter::new(ModelConfig::tiny(), 1).unwrap();
    let img = common::random_image(4);
    let a = m.encode_image(&img).unwrap();
    let b = m.encode_image(&img).unwrap();
    assert_eq!(common::max_abs_diff(&a.tokens, &b.tokens), 0.0);
    let twin = Segmenter::new(ModelConfig::tiny(), 1).unwrap();
    let c = twin.encode_image(&img).unwrap();
    assert_eq!(common::max_abs_diff(&a.embedding, &c.embedding), 0.0);
}

#[test]
fn wrong_image_size_is_rejected() {
    let m = Segmenter::new(ModelConfig::tiny(), 1).unwrap();
    let img = Tensor::zeros((3, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
    assert!(m.encode_image(&img).is_err());
}

#[test]
fn prompt_embeddings() {
    let m = Segmenter::new(ModelConfig::tiny(), 1).unwrap();
    let pts = vec![PromptPoint::positive(3., 4.), PromptPoint::negative(30., 9.), PromptPoint::positive(60., 60.)];
    let e = m.encode_prompts(&[PromptSet::new(pts)]).unwrap();
    assert_eq!(e.batch(), 1);
    assert_eq!(e.points_per_prompt(), 3);

    let pos = m.encode_prompts(&[PromptSet::new(vec![PromptPoint::positive(10., 10.)])]).unwrap();
    let neg = m.encode_prompts(&[PromptSet::new(vec![PromptPoint::negative(10., 10.)])]).unwrap();
    assert!(common::max_abs_diff(&pos.points, &neg.points) > 1e-3);

    assert!(m.encode_prompts(&[PromptSet::new(vec![])]).is_err());
    assert!(m.encode_prompts(&[]).is_err());
    assert!(m.encode_prompts(&[PromptSet::new(vec![PromptPoint::positive(64.5, 3.)])]).is_err());
    assert!(m.encode_prompts(&[PromptSet::new(vec![PromptPoint::positive(-1., 3.)])]).is_err());
}

#[test]
fn decoding_shapes_and_ranges() {
    let m = Segmenter::new(ModelConfig::tiny(), 2).unwrap();
    let img = common::random_image(7);
    let p = PromptSet::new(vec![PromptPoint::positive(10., 20.)]);
    let one = m.predict(&img, std::slice::from_ref(&p)).unwrap();
    assert_eq!(one.masks.dims(), &[1, 3, 64, 64]);
    assert_eq!(one.iou_scores.dims(), &[1, 3]);
    let scores = one.scores().unwrap();
    assert!(scores[0].iter().all(|s| (0.0..=1.0).contains(s)));
    let logits: Vec<f32> = one.masks.flatten_all().unwrap().to_vec1().unwrap();
    assert!(logits.iter().all(|v| v.is_finite()));
}

#[test]
fn batching_preserves_order() {
    let m = Segmenter::new(ModelConfig::tiny(), 2).unwrap();
    let img = common::random_image(8);
    let prompts: Vec<PromptSet> = [(5., 5.), (40., 12.), (22., 50.), (60., 61.)]
        .iter()
        .map(|&(x, y)| PromptSet::new(vec![PromptPoint::positive(x, y)]))
        .collect();
    let batched = m.predict(&img, &prompts).unwrap();
    assert_eq!(batched.masks.dims(), &[4, 3, 64, 64]);
    for (i, p) in prompts.iter().enumerate() {
        let single = m.predict(&img, std::slice::from_ref(p)).unwrap();
        let row = batched.masks.narrow(0, i, 1).unwrap();
        assert!(common::max_abs_diff(&row, &single.masks) < 1e-5);
    }
}

#[test]
fn decoding_rejects_foreign_tokens() {
    let tiny = Segmenter::new(ModelConfig::tiny(), 2).unwrap();
    let mut other_cfg = ModelConfig::tiny();
    other_cfg.patch_size = 16;
    other_cfg.window_size = 2;
    let other = Segmenter::new(other_cfg, 2).unwrap();
    let tokens = other.encode_image(&common::random_image(1)).unwrap();
    let prompts = tiny.encode_prompts(&[PromptSet::new(vec![PromptPoint::positive(1., 1.)])]).unwrap();
    assert!(tiny.decode_masks(&tokens, &prompts).is_err());
}

#[test]
fn mode_strings_round_trip() {
    for m in [DecoderMode::Frozen, DecoderMode::Full, DecoderMode::Lora] {
        assert_eq!(m.to_string().parse::<DecoderMode>().unwrap(), m);
    }
    assert!("partial".parse::<DecoderMode>().is_err());
}
