//! The promptable segmentation model: image encoder, prompt encoder and
//! mask decoder, plus fine-tune mode configuration.

mod config;
mod image_encoder;
mod mask_decoder;
mod prompt_encoder;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, Preset};
pub use prompt_encoder::PromptEmbeddings;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::lora::{self, Adaptable, LoraSpec, LoraTarget, ProjectionSite};
use crate::mask::BinaryMask;
use crate::nn::{resize_bilinear, Linear};
use crate::params::{BuildState, Fill, ParamStore};
use crate::prompting::PromptSet;
use image_encoder::ImageEncoder;
use mask_decoder::{DecoderAttention, MaskDecoder};
use prompt_encoder::PromptEncoder;

/// How the mask decoder is treated during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    Frozen,
    Full,
    Lora,
}

impl std::str::FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(DecoderMode::Frozen),
            "full" => Ok(DecoderMode::Full),
            "lora" => Ok(DecoderMode::Lora),
            other => Err(Error::Config(format!("unknown decoder mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecoderMode::Frozen => "frozen",
            DecoderMode::Full => "full",
            DecoderMode::Lora => "lora",
        })
    }
}

/// Which parts of the model train. The image encoder is always adapted with
/// LoRA and the prompt encoder is always frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneMode {
    pub decoder: DecoderMode,
}

impl FinetuneMode {
    pub fn new(decoder: DecoderMode) -> Self {
        Self { decoder }
    }

    /// Adapter targets implied by this mode: encoder q/v, plus decoder q/v
    /// when the decoder is LoRA-adapted.
    pub fn lora_spec(self, rank: usize) -> LoraSpec {
        match self.decoder {
            DecoderMode::Lora => LoraSpec::encoder_decoder_qv(rank),
            _ => LoraSpec::encoder_qv(rank),
        }
    }
}

/// Trainable-parameter totals per model component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCounts {
    pub image_encoder: usize,
    pub prompt_encoder: usize,
    pub mask_decoder: usize,
}

impl ComponentCounts {
    pub fn total(&self) -> usize {
        self.image_encoder + self.prompt_encoder + self.mask_decoder
    }
}

/// Encoder outputs for one image.
#[derive(Clone, Debug)]
pub struct ImageTokens {
    /// Token grid `(g, g, encoder_width)`.
    pub tokens: Tensor,
    /// Neck embedding `(1, decoder_width, g, g)` consumed by the decoder.
    pub embedding: Tensor,
}

impl ImageTokens {
    pub fn grid_shape(&self) -> (usize, usize, usize) {
        let d = self.tokens.dims();
        (d[0], d[1], d[2])
    }
}

/// Three candidate masks and IoU predictions per prompt.
#[derive(Clone, Debug)]
pub struct MaskOutput {
    /// `(B, 3, S, S)` logits at image resolution.
    pub masks: Tensor,
    /// `(B, 3, 4g, 4g)` decoder-resolution logits.
    pub low_res: Tensor,
    /// `(B, 3)` unclamped IoU head output, used for regression.
    pub iou_raw: Tensor,
    /// `(B, 3)` IoU predictions clamped to `[0, 1]`.
    pub iou_scores: Tensor,
}

impl MaskOutput {
    pub fn batch(&self) -> usize {
        self.masks.dims()[0]
    }

    pub fn image_size(&self) -> usize {
        self.masks.dims()[2]
    }

    pub fn scores(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.iou_scores.to_vec2::<f32>()?)
    }

    /// Logits of mask `m` for prompt `b`, row-major.
    pub fn logits(&self, b: usize, m: usize) -> Result<Vec<f32>> {
        Ok(self.masks.get(b)?.get(m)?.flatten_all()?.to_vec1::<f32>()?)
    }

    /// Mask `m` of prompt `b` binarized at logit 0.
    pub fn binary(&self, b: usize, m: usize) -> Result<BinaryMask> {
        let s = self.image_size();
        BinaryMask::from_logits(s, s, &self.logits(b, m)?, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneState {
    pub mode: FinetuneMode,
    pub spec: LoraSpec,
    /// Names of the projections carrying adapters.
    pub adapted: Vec<String>,
}

pub struct Segmenter {
    config: ModelConfig,
    store: ParamStore,
    encoder: ImageEncoder,
    prompt_encoder: PromptEncoder,
    decoder: MaskDecoder,
    finetune: Option<FinetuneState>,
    device: Device,
    seed: u64,
}

/// Keeps adapter initialization independent of the base-weight stream.
const ADAPTER_STREAM: u64 = 0x4c6f_5241_0000_0001;

impl std::fmt::Debug for Segmenter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Segmenter")
            .field("preset", &self.config.preset)
            .field("params", &self.store.total_count())
            .field("finetune", &self.finetune)
            .finish()
    }
}

impl Segmenter {
    /// Randomly initialized model; the same seed always gives the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, Fill::Random)
    }

    /// Model with every weight zero; used for parameter audits and as a
    /// target for checkpoint loading.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        Self::build(config, 0, Fill::Zeros)
    }

    fn build(config: ModelConfig, seed: u64, fill: Fill) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut st = BuildState::new(ChaCha8Rng::seed_from_u64(seed), fill, device.clone());
        let (encoder, prompt_encoder, decoder) = {
            let mut root = st.root();
            let encoder = ImageEncoder::new(&mut root.pp("encoder"), &config)?;
            let prompt_encoder = PromptEncoder::new(&mut root.pp("prompt_encoder"), &config)?;
            let decoder = MaskDecoder::new(&mut root.pp("decoder"), &config)?;
            (encoder, prompt_encoder, decoder)
        };
        Ok(Self {
            config,
            store: st.store,
            encoder,
            prompt_encoder,
            decoder,
            finetune: None,
            device,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn finetune(&self) -> Option<&FinetuneState> {
        self.finetune.as_ref()
    }

    /// `image`: `(3, S, S)` or `(1, 3, S, S)`, already normalized.
    pub fn encode_image(&self, image: &Tensor) -> Result<ImageTokens> {
        let s = self.config.image_size;
        let image = match image.rank() {
            3 => image.unsqueeze(0)?,
            4 if image.dims()[0] == 1 => image.clone(),
            _ => {
                return Err(Error::Shape(format!(
                    "expected a (3, {s}, {s}) image, got {:?}",
                    image.dims()
                )))
            }
        };
        if image.dims()[1..] != [3, s, s] {
            return Err(Error::Shape(format!(
                "expected a (3, {s}, {s}) image, got {:?}",
                &image.dims()[1..]
            )));
        }
        let image = image.to_dtype(DType::F32)?;
        let (tokens, embedding) = self.encoder.forward(&image)?;
        Ok(ImageTokens {
            tokens: tokens.squeeze(0)?,
            embedding,
        })
    }

    /// Normalizes an HWC raster with the configured statistics and encodes it.
    pub fn encode_raster(&self, image: &Image) -> Result<ImageTokens> {
        let s = self.config.image_size;
        if image.width() != s || image.height() != s {
            return Err(Error::Shape(format!(
                "expected a {s}x{s} image, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let norm = self.config.normalization.apply(image)?;
        self.encode_image(&norm.to_tensor(&self.device)?)
    }

    pub fn encode_prompts(&self, prompts: &[PromptSet]) -> Result<PromptEmbeddings> {
        self.prompt_encoder.encode(prompts)
    }

    pub fn decode_masks(&self, tokens: &ImageTokens, prompts: &PromptEmbeddings) -> Result<MaskOutput> {
        let g = self.config.grid_size();
        let d = self.config.decoder_width;
        if tokens.embedding.dims() != [1, d, g, g] {
            return Err(Error::Shape(format!(
                "image embedding {:?} does not match model geometry (1, {d}, {g}, {g})",
                tokens.embedding.dims()
            )));
        }
        if prompts.width() != d {
            return Err(Error::Shape(format!(
                "prompt embedding width {} does not match decoder width {d}",
                prompts.width()
            )));
        }
        let sparse = Tensor::cat(&[&prompts.points, &prompts.padding], 1)?;
        let pe = self.prompt_encoder.dense_pe()?;
        let out = self
            .decoder
            .forward(&tokens.embedding, &pe, &sparse, &prompts.dense)?;
        let k = self.config.masks_per_prompt;
        let low_res = out.low_res.narrow(1, 1, k)?;
        let iou_raw = out.iou.narrow(1, 1, k)?;
        let s = self.config.image_size;
        let masks = resize_bilinear(&low_res, s, s)?;
        let iou_scores = iou_raw.clamp(0f32, 1f32)?;
        Ok(MaskOutput {
            masks,
            low_res,
            iou_raw,
            iou_scores,
        })
    }

    /// Encodes `image` and decodes one output per prompt set.
    pub fn predict(&self, image: &Tensor, prompts: &[PromptSet]) -> Result<MaskOutput> {
        let tokens = self.encode_image(image)?;
        let emb = self.encode_prompts(prompts)?;
        self.decode_masks(&tokens, &emb)
    }

    /// Sets trainable flags for `mode` and attaches adapters from `spec`.
    pub fn configure_finetune(&mut self, mode: FinetuneMode, spec: &LoraSpec) -> Result<()> {
        if self.finetune.is_some() {
            return Err(Error::Config("model is already configured for fine-tuning".into()));
        }
        if self.has_adapters() {
            return Err(Error::AlreadyAdapted);
        }
        spec.validate()?;
        let wants_decoder = spec.has_decoder_targets();
        match (mode.decoder, wants_decoder) {
            (DecoderMode::Lora, false) => {
                return Err(Error::Config(
                    "decoder mode lora needs decoder_q or decoder_v targets".into(),
                ))
            }
            (DecoderMode::Frozen | DecoderMode::Full, true) => {
                return Err(Error::Config(format!(
                    "decoder targets given but decoder mode is {}",
                    mode.decoder
                )))
            }
            _ => {}
        }
        if spec.targets.is_empty() && mode.decoder == DecoderMode::Frozen {
            return Err(Error::Config(
                "nothing to train: no LoRA targets and the decoder is frozen".into(),
            ));
        }

        self.store.freeze_all();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ADAPTER_STREAM);
        let adapted = if spec.targets.is_empty() {
            Vec::new()
        } else {
            lora::inject(self, spec, &mut rng)?
        };
        if mode.decoder == DecoderMode::Full {
            self.store
                .set_trainable_where(|n| n.starts_with("decoder.") && !is_lora_name(n), true);
        }
        self.finetune = Some(FinetuneState {
            mode,
            spec: spec.clone(),
            adapted,
        });
        Ok(())
    }

    pub fn has_adapters(&self) -> bool {
        self.store.iter().any(|p| is_lora_name(p.name()))
    }

    pub fn count_trainable(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn count_by_component(&self) -> ComponentCounts {
        let mut c = ComponentCounts::default();
        for p in self.store.iter().filter(|p| p.is_trainable()) {
            let n = p.elem_count();
            let name = p.name();
            if name.starts_with("encoder.") {
                c.image_encoder += n;
            } else if name.starts_with("prompt_encoder.") {
                c.prompt_encoder += n;
            } else {
                c.mask_decoder += n;
            }
        }
        c
    }

    /// Folds every adapter into its base weight and removes the adapter
    /// parameters. Returns the names of the merged projections.
    pub fn merge_adapters(&mut self) -> Result<Vec<String>> {
        let mut merged = Vec::new();
        let mut removed = Vec::new();
        self.for_each_projection(true, &mut |name, _, lin| {
            if let Some(ad) = lin.detach_adapter() {
                let w = lora::merge(&lin.weight().snapshot()?, &ad.pair()?, ad.scaling)?;
                lin.weight().assign(&w)?;
                removed.push(ad.a.name().to_string());
                removed.push(ad.b.name().to_string());
                merged.push(name.to_string());
            }
            Ok(())
        })?;
        for n in removed {
            self.store.remove(&n);
        }
        self.finetune = None;
        Ok(merged)
    }

    /// Calls `f` on every attention projection with its name and LoRA target kind.
    fn for_each_projection(
        &mut self,
        include_final: bool,
        f: &mut dyn FnMut(&str, Option<LoraTarget>, &mut Linear) -> Result<()>,
    ) -> Result<()> {
        for (i, blk) in self.encoder.blocks.iter_mut().enumerate() {
            let a = &mut blk.attn;
            for (p, lin) in [
                ("q", &mut a.q),
                ("k", &mut a.k),
                ("v", &mut a.v),
                ("proj", &mut a.proj),
            ] {
                let target = match p {
                    "q" => Some(LoraTarget::EncoderQ),
                    "v" => Some(LoraTarget::EncoderV),
                    _ => None,
                };
                f(&format!("encoder.block{i}.attn.{p}"), target, lin)?;
            }
        }
        let visit_dec = |prefix: String,
                         attn: &mut DecoderAttention,
                         adaptable: bool,
                         f: &mut dyn FnMut(&str, Option<LoraTarget>, &mut Linear) -> Result<()>|
         -> Result<()> {
            for (p, lin) in attn.projections_mut() {
                let target = match (p, adaptable) {
                    ("q", true) => Some(LoraTarget::DecoderQ),
                    ("v", true) => Some(LoraTarget::DecoderV),
                    _ => None,
                };
                f(&format!("{prefix}.{p}"), target, lin)?;
            }
            Ok(())
        };
        for (i, blk) in self.decoder.blocks.iter_mut().enumerate() {
            visit_dec(format!("decoder.block{i}.self_attn"), &mut blk.self_attn, true, f)?;
            visit_dec(format!("decoder.block{i}.cross_t2i"), &mut blk.cross_t2i, true, f)?;
            visit_dec(format!("decoder.block{i}.cross_i2t"), &mut blk.cross_i2t, true, f)?;
        }
        visit_dec("decoder.final_attn".into(), &mut self.decoder.final_attn, include_final, f)?;
        Ok(())
    }
}

pub(crate) fn is_lora_name(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

impl Adaptable for Segmenter {
    fn visit_projections(
        &mut self,
        spec: &LoraSpec,
        f: &mut dyn FnMut(ProjectionSite<'_>, &mut ParamStore) -> Result<()>,
    ) -> Result<()> {
        let mut store = std::mem::take(&mut self.store);
        let r = self.for_each_projection(spec.include_final_decoder_attn, &mut |name, target, linear| {
            f(
                ProjectionSite {
                    name: name.to_string(),
                    target,
                    linear,
                },
                &mut store,
            )
        });
        self.store = store;
        r
    }

    fn param_store(&self) -> &ParamStore {
        &self.store
    }
}
