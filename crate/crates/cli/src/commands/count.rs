use fieldsam_core::{DecoderMode, FinetuneMode, LoraTarget, ModelConfig, Preset, Segmenter};
use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CountRow {
    pub preset: Preset,
    pub decoder: DecoderMode,
    pub rank: usize,
    pub encoder_lora: bool,
    pub image_encoder: usize,
    pub prompt_encoder: usize,
    pub mask_decoder: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct CountArgs {
    pub preset: Preset,
    pub decoder: DecoderMode,
    pub rank: usize,
    pub encoder_lora: bool,
    pub include_final_decoder_attn: bool,
}

/// Trainable parameters of one fine-tune setting. A setting that trains
/// nothing yields a zero row.
pub fn count(args: &CountArgs) -> Result<CountRow> {
    if args.rank == 0 {
        return Err(CliError::Config("rank must be at least 1".into()));
    }
    let mode = FinetuneMode::new(args.decoder);
    let mut spec = mode.lora_spec(args.rank);
    spec.include_final_decoder_attn = args.include_final_decoder_attn;
    if !args.encoder_lora {
        spec.targets.remove(&LoraTarget::EncoderQ);
        spec.targets.remove(&LoraTarget::EncoderV);
    }
    let zero = CountRow {
        preset: args.preset,
        decoder: args.decoder,
        rank: args.rank,
        encoder_lora: args.encoder_lora,
        image_encoder: 0,
        prompt_encoder: 0,
        mask_decoder: 0,
        total: 0,
    };
    if spec.targets.is_empty() && args.decoder == DecoderMode::Frozen {
        return Ok(zero);
    }
    let mut model = Segmenter::zeroed(ModelConfig::preset(args.preset))?;
    model.configure_finetune(mode, &spec)?;
    let c = model.count_by_component();
    Ok(CountRow {
        image_encoder: c.image_encoder,
        prompt_encoder: c.prompt_encoder,
        mask_decoder: c.mask_decoder,
        total: c.total(),
        ..zero
    })
}

/// The five trainable-parameter settings of the reference audit on `preset`:
/// frozen decoder at ranks 8 and 32, LoRA decoder at ranks 8 and 32, and a
/// fully trained decoder at rank 8.
pub fn reference_table(preset: Preset) -> Result<Vec<CountRow>> {
    [
        (DecoderMode::Frozen, 8),
        (DecoderMode::Frozen, 32),
        (DecoderMode::Lora, 8),
        (DecoderMode::Lora, 32),
        (DecoderMode::Full, 8),
    ]
    .into_iter()
    .map(|(decoder, rank)| {
        count(&CountArgs {
            preset,
            decoder,
            rank,
            encoder_lora: true,
            include_final_decoder_attn: true,
        })
    })
    .collect()
}

pub fn format_rows(rows: &[CountRow]) -> String {
    let mut out = format!(
        "{:<7} {:<7} {:>4} {:>8} {:>13} {:>14} {:>12} {:>10}\n",
        "preset", "decoder", "rank", "enc_lora", "image_encoder", "prompt_encoder", "mask_decoder", "total"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<7} {:<7} {:>4} {:>8} {:>13} {:>14} {:>12} {:>10}\n",
            r.preset.to_string(),
            r.decoder.to_string(),
            r.rank,
            r.encoder_lora,
            r.image_encoder,
            r.prompt_encoder,
            r.mask_decoder,
            r.total
        ));
    }
    out
}
