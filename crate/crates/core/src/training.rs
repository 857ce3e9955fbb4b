//! Fine-tuning: per-mask segmentation loss, min-of-three selection, IoU-head
//! regression and the AdamW warm-up schedule.

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::mask_iou;
use crate::prompting::{sample_multi, sample_single_positive, MultiConfig, PromptSet};
use crate::segmenter::{DecoderMode, FinetuneMode, Segmenter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// One positive point per instance.
    Single,
    /// Positive and negative points near the boundary, fed as one prompt.
    Multi,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(PromptMode::Single),
            "multi" => Ok(PromptMode::Multi),
            other => Err(Error::Config(format!("unknown prompt mode {other:?}"))),
        }
    }
}

/// Weights and shape parameters of the training loss.
///
/// For a mask with logits `x`, probabilities `p = σ(x)` and target `t`:
///
/// * focal = mean over pixels of `a_t · ce · (1 − p_t)^γ`, with
///   `ce = max(x, 0) − x·t + ln(1 + e^{−|x|})`, `p_t = p·t + (1−p)(1−t)`,
///   `a_t = α·t + (1−α)(1−t)`
/// * dice = `1 − (2·Σ p·t + 1) / (Σ p + Σ t + 1)`
/// * seg = `focal_weight · focal + dice_weight · dice`
/// * iou = `(iou_pred − iou_target)^2`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_weight: f64,
    pub dice_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub iou_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_weight: 20.0,
            dice_weight: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            iou_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Only `"float32"` is accepted.
    pub precision: String,
    pub prompt_mode: PromptMode,
    pub finetune_mode: FinetuneMode,
    pub lora_rank: usize,
    pub lora_scaling: f64,
    pub include_final_decoder_attn: bool,
    /// Instances prompted per image and step; larger sets are subsampled.
    pub max_prompts_per_image: usize,
    pub max_steps: usize,
    /// Run validation every this many steps; 0 disables it.
    pub eval_every: usize,
    /// Stop after this many validations without a better validation mAP50.
    pub early_stop_patience: Option<usize>,
    /// Write an adapter checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub loss: LossConfig,
    pub multi: MultiConfig,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weight_decay: 5e-4,
            peak_lr: 5e-5,
            warmup_steps: 256,
            batch_size: 4,
            precision: "float32".into(),
            prompt_mode: PromptMode::Single,
            finetune_mode: FinetuneMode::new(DecoderMode::Lora),
            lora_rank: 8,
            lora_scaling: 1.0,
            include_final_decoder_attn: true,
            max_prompts_per_image: 16,
            max_steps: 2000,
            eval_every: 0,
            early_stop_patience: None,
            checkpoint_every: 0,
            loss: LossConfig::default(),
            multi: MultiConfig::default(),
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.precision.as_str(), "float32" | "f32" | "fp32") {
            return bad(format!(
                "precision {:?} is not supported; training runs in float32 only",
                self.precision
            ));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_prompts_per_image == 0 {
            return bad("max_prompts_per_image must be at least 1".into());
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1".into());
        }
        self.multi.band.validate()?;
        Ok(())
    }

    pub fn lora_spec(&self) -> crate::lora::LoraSpec {
        let mut spec = self.finetune_mode.lora_spec(self.lora_rank).with_scaling(self.lora_scaling);
        spec.include_final_decoder_attn = self.include_final_decoder_attn;
        spec
    }
}

/// Learning rate of optimizer step `step`: a linear ramp from 0 at step 0 to
/// `peak_lr` at `warmup_steps`, constant afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.peak_lr
    } else {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    }
}

/// Index and value of the smallest of three losses, ties to the lowest index.
pub fn min_of_three(losses: [f64; 3]) -> Result<(usize, f64)> {
    if let Some(i) = losses.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("mask loss {i} is NaN: {losses:?}")));
    }
    let mut best = 0;
    for i in 1..3 {
        if losses[i] < losses[best] {
            best = i;
        }
    }
    Ok((best, losses[best]))
}

/// IoU of a binarized prediction with the ground truth; 1 when both are empty.
pub fn iou_target(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    mask_iou(pred, gt)
}

/// Per-mask segmentation losses. `logits`: `(..., H, W)`; `gt`: a 0/1
/// tensor broadcastable to `logits`. Returns the leading dimensions.
pub fn seg_loss_tensor(logits: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let ld = logits.dims();
    let gd = gt.dims();
    if ld.len() < 2 || gd.len() < 2 || ld[ld.len() - 2..] != gd[gd.len() - 2..] {
        return Err(Error::Shape(format!(
            "logits {ld:?} and target {gd:?} differ in spatial shape"
        )));
    }
    let t = gt.to_dtype(DType::F32)?.broadcast_as(ld)?;
    let x = logits;
    let p = candle_nn::ops::sigmoid(x)?;
    let one_minus_t = (1.0 - &t)?;
    let ce = ((x.relu()? - (x * &t)?)? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let p_t = ((&p * &t)? + ((1.0 - &p)? * &one_minus_t)?)?;
    let mod_factor = if cfg.focal_gamma == 2.0 {
        (1.0 - &p_t)?.sqr()?
    } else {
        (1.0 - &p_t)?.relu()?.powf(cfg.focal_gamma)?
    };
    let alpha_t = ((&t * cfg.focal_alpha)? + (&one_minus_t * (1.0 - cfg.focal_alpha))?)?;
    let focal = (alpha_t * ce)?.mul(&mod_factor)?;
    let focal = focal.mean(D::Minus1)?.mean(D::Minus1)?;

    let inter = (&p * &t)?.sum(D::Minus1)?.sum(D::Minus1)?;
    let psum = p.sum(D::Minus1)?.sum(D::Minus1)?;
    let tsum = t.sum(D::Minus1)?.sum(D::Minus1)?;
    let dice = (1.0 - ((inter * 2.0)? + 1.0)?.div(&((psum + tsum)? + 1.0)?)?)?;
    Ok(((focal * cfg.focal_weight)? + (dice * cfg.dice_weight)?)?)
}

/// Scalar segmentation loss of one logit map against a binary mask.
pub fn seg_loss(logits: &[f32], gt: &BinaryMask, cfg: &LossConfig) -> Result<f64> {
    let (w, h) = gt.shape();
    if logits.len() != w * h {
        return Err(Error::Shape(format!(
            "{} logits for a {w}x{h} mask",
            logits.len()
        )));
    }
    let dev = candle_core::Device::Cpu;
    let x = Tensor::from_slice(logits, (h, w), &dev)?;
    let t = Tensor::from_vec(gt.to_f32(), (h, w), &dev)?;
    Ok(seg_loss_tensor(&x, &t, cfg)?.to_scalar::<f32>()? as f64)
}

/// One training image with its instance masks at model resolution.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// `(3, S, S)`, already normalized.
    pub image: Tensor,
    pub instances: Vec<BinaryMask>,
}

/// An image with one prompt per selected instance.
#[derive(Clone, Debug)]
pub struct PromptedSample {
    pub image: Tensor,
    pub prompts: Vec<PromptSet>,
    pub targets: Vec<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub lr: f64,
    /// Selected mask per prompt, in batch order.
    pub selected_mask_index: Vec<usize>,
    /// Mean over prompts of the minimum per-mask segmentation loss.
    pub seg_loss: f64,
    pub iou_loss: f64,
    pub total: f64,
}

/// Draws prompts for up to `cfg.max_prompts_per_image` non-empty instances.
pub fn prompt_sample(sample: &TrainSample, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<PromptedSample> {
    let candidates: Vec<usize> = (0..sample.instances.len())
        .filter(|&i| !sample.instances[i].is_empty())
        .collect();
    let chosen: Vec<usize> = if candidates.len() > cfg.max_prompts_per_image {
        let mut picked: Vec<usize> = index::sample(rng, candidates.len(), cfg.max_prompts_per_image)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        picked.sort_unstable();
        picked
    } else {
        candidates
    };
    let mut prompts = Vec::with_capacity(chosen.len());
    let mut targets = Vec::with_capacity(chosen.len());
    for i in chosen {
        let mask = &sample.instances[i];
        let p = match cfg.prompt_mode {
            PromptMode::Single => sample_single_positive(mask, rng)?,
            PromptMode::Multi => {
                let s = sample_multi(mask, &cfg.multi, rng)?;
                if !s.fallbacks.is_empty() {
                    log::debug!("instance {i}: prompt sampling fell back: {:?}", s.fallbacks);
                }
                s.prompt
            }
        };
        prompts.push(p.with_instance(i as u32 + 1));
        targets.push(mask.clone());
    }
    Ok(PromptedSample {
        image: sample.image.clone(),
        prompts,
        targets,
    })
}

struct BatchLoss {
    total: Tensor,
    seg: f64,
    iou: f64,
    selected: Vec<usize>,
}

fn batch_loss(model: &Segmenter, batch: &[PromptedSample], cfg: &LossConfig) -> Result<BatchLoss> {
    let n: usize = batch.iter().map(|s| s.prompts.len()).sum();
    if n == 0 {
        return Err(Error::Input("batch contains no prompts".into()));
    }
    let dev = model.device().clone();
    let mut seg_sum: Option<Tensor> = None;
    let mut iou_sum: Option<Tensor> = None;
    let mut selected = Vec::with_capacity(n);
    for s in batch.iter().filter(|s| !s.prompts.is_empty()) {
        if s.prompts.len() != s.targets.len() {
            return Err(Error::Input("prompts and targets differ in length".into()));
        }
        let out = model.predict(&s.image, &s.prompts)?;
        let size = out.image_size();
        let mut gt = Vec::with_capacity(s.targets.len() * size * size);
        for t in &s.targets {
            if t.shape() != (size, size) {
                return Err(Error::Shape(format!(
                    "target mask {:?} does not match output size {size}",
                    t.shape()
                )));
            }
            gt.extend(t.to_f32());
        }
        let p = s.targets.len();
        let gt = Tensor::from_vec(gt, (p, 1, size, size), &dev)?;
        let losses = seg_loss_tensor(&out.masks, &gt, cfg)?; // (P, 3)
        let vals = losses.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut idx = Vec::with_capacity(p);
        let mut targets = Vec::with_capacity(p);
        for (j, row) in vals.iter().enumerate() {
            let (k, _) = min_of_three([row[0], row[1], row[2]])?;
            idx.push(k as u32);
            selected.push(k);
            let pred = out.binary(j, k)?;
            targets.push(iou_target(&pred, &s.targets[j])? as f32);
        }
        let idx = Tensor::from_vec(idx, (p, 1), &dev)?;
        let seg = losses.contiguous()?.gather(&idx, 1)?.sum_all()?;
        let iou_pred = out.iou_raw.contiguous()?.gather(&idx, 1)?;
        let iou_t = Tensor::from_vec(targets, (p, 1), &dev)?;
        let iou = (iou_pred - iou_t)?.sqr()?.sum_all()?;
        seg_sum = Some(match seg_sum {
            Some(a) => (a + seg)?,
            None => seg,
        });
        iou_sum = Some(match iou_sum {
            Some(a) => (a + iou)?,
            None => iou,
        });
    }
    let seg = (seg_sum.expect("non-empty batch") / n as f64)?;
    let iou = (iou_sum.expect("non-empty batch") / n as f64)?;
    let total = (&seg + (&iou * cfg.iou_weight)?)?;
    Ok(BatchLoss {
        seg: seg.to_scalar::<f32>()? as f64,
        iou: iou.to_scalar::<f32>()? as f64,
        total,
        selected,
    })
}

/// Owns a configured model and its optimizer state.
pub struct Trainer {
    model: Segmenter,
    opt: AdamW,
    cfg: TrainConfig,
    step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// `model` must already be configured for fine-tuning.
    pub fn new(model: Segmenter, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if model.finetune().is_none() {
            return Err(Error::Config("model has not been configured for fine-tuning".into()));
        }
        let vars = model.params().trainable_vars();
        if vars.is_empty() {
            return Err(Error::Config("model has no trainable parameters".into()));
        }
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: 0.0,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Self {
            model,
            opt,
            cfg,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn model(&self) -> &Segmenter {
        &self.model
    }

    pub fn into_model(self) -> Segmenter {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Number of optimizer steps taken so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Draws prompts for `sample` from the trainer's random stream.
    pub fn prompt(&mut self, sample: &TrainSample) -> Result<PromptedSample> {
        prompt_sample(sample, &self.cfg, &mut self.rng)
    }

    /// One optimizer step on `batch`. The `t`-th step (counting from 1) uses
    /// `lr_at(t)`.
    pub fn step(&mut self, batch: &[PromptedSample]) -> Result<StepLoss> {
        let t = self.step + 1;
        let lr = lr_at(t, &self.cfg);
        let loss = batch_loss(&self.model, batch, &self.cfg.loss)?;
        let total = loss.total.to_scalar::<f32>()? as f64;
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: t,
                lr,
                seg_loss: loss.seg,
                iou_loss: loss.iou,
                total,
            });
        }
        self.opt.set_learning_rate(lr);
        let grads = loss.total.backward()?;
        self.opt.step(&grads)?;
        self.step = t;
        Ok(StepLoss {
            step: t,
            lr,
            selected_mask_index: loss.selected,
            seg_loss: loss.seg,
            iou_loss: loss.iou,
            total,
        })
    }

    /// Loss on `batch` without updating anything.
    pub fn evaluate_loss(&self, batch: &[PromptedSample]) -> Result<StepLoss> {
        let loss = batch_loss(&self.model, batch, &self.cfg.loss)?;
        Ok(StepLoss {
            step: self.step,
            lr: lr_at(self.step, &self.cfg),
            selected_mask_index: loss.selected,
            seg_loss: loss.seg,
            iou_loss: loss.iou,
            total: loss.total.to_scalar::<f32>()? as f64,
        })
    }
}

/// Loss of `model` on `batch` without an optimizer.
pub fn evaluate_loss(model: &Segmenter, batch: &[PromptedSample], cfg: &LossConfig) -> Result<StepLoss> {
    let loss = batch_loss(model, batch, cfg)?;
    Ok(StepLoss {
        step: 0,
        lr: 0.0,
        selected_mask_index: loss.selected,
        seg_loss: loss.seg,
        iou_loss: loss.iou,
        total: loss.total.to_scalar::<f32>()? as f64,
    })
}
