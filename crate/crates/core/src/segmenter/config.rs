use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Normalization;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small random-init geometry used by tests and smoke runs.
    Tiny,
    /// The ViT-B image encoder with the standard 256-wide mask decoder.
    VitB,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "vit_b" | "vit-b" => Ok(Preset::VitB),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::VitB => "vit_b",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_width: usize,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    pub encoder_mlp_ratio: usize,
    /// Side of the local attention window; 0 means global attention everywhere.
    pub window_size: usize,
    /// Blocks that use global attention even when windows are enabled.
    pub global_attn_blocks: Vec<usize>,
    pub use_rel_pos: bool,
    pub decoder_width: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    pub attention_downsample: usize,
    pub iou_head_hidden: usize,
    pub iou_head_depth: usize,
    pub masks_per_prompt: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Tiny => Self::tiny(),
            Preset::VitB => Self::vit_b(),
        }
    }

    pub fn tiny() -> Self {
        Self {
            preset: Preset::Tiny,
            image_size: 64,
            patch_size: 8,
            encoder_width: 32,
            encoder_blocks: 2,
            encoder_heads: 2,
            encoder_mlp_ratio: 4,
            window_size: 4,
            global_attn_blocks: vec![1],
            use_rel_pos: true,
            decoder_width: 32,
            decoder_blocks: 2,
            decoder_heads: 2,
            decoder_mlp_dim: 64,
            attention_downsample: 2,
            iou_head_hidden: 32,
            iou_head_depth: 3,
            masks_per_prompt: 3,
            normalization: Normalization::identity(),
        }
    }

    pub fn vit_b() -> Self {
        Self {
            preset: Preset::VitB,
            image_size: 1024,
            patch_size: 16,
            encoder_width: 768,
            encoder_blocks: 12,
            encoder_heads: 12,
            encoder_mlp_ratio: 4,
            window_size: 14,
            global_attn_blocks: vec![2, 5, 8, 11],
            use_rel_pos: true,
            decoder_width: 256,
            decoder_blocks: 2,
            decoder_heads: 8,
            decoder_mlp_dim: 2048,
            attention_downsample: 2,
            iou_head_hidden: 256,
            iou_head_depth: 3,
            masks_per_prompt: 3,
            normalization: Normalization::default(),
        }
    }

    /// Side of the square token grid.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `(rows, cols, width)` of the encoder token grid.
    pub fn token_grid_shape(&self) -> (usize, usize, usize) {
        (self.grid_size(), self.grid_size(), self.encoder_width)
    }

    /// Side of the low-resolution mask produced before upsampling.
    pub fn low_res_mask_size(&self) -> usize {
        self.grid_size() * 4
    }

    /// Number of learned output tokens: one single-mask token plus the multimask set.
    pub fn mask_tokens(&self) -> usize {
        self.masks_per_prompt + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.masks_per_prompt != 3 {
            return bad(format!(
                "masks_per_prompt must be 3, got {}",
                self.masks_per_prompt
            ));
        }
        if self.encoder_heads == 0 || self.encoder_width % self.encoder_heads != 0 {
            return bad("encoder width must be divisible by encoder heads".into());
        }
        if self.decoder_width % 8 != 0 {
            return bad("decoder width must be divisible by 8".into());
        }
        let internal = self.decoder_width / self.attention_downsample.max(1);
        if self.decoder_heads == 0
            || self.decoder_width % self.decoder_heads != 0
            || internal % self.decoder_heads != 0
        {
            return bad("decoder attention widths must be divisible by decoder heads".into());
        }
        if self.global_attn_blocks.iter().any(|&b| b >= self.encoder_blocks) {
            return bad("global attention block index out of range".into());
        }
        if self.iou_head_depth == 0 || self.encoder_blocks == 0 {
            return bad("encoder depth and IoU head depth must be positive".into());
        }
        Ok(())
    }

    /// Human-readable list of geometry differences, empty when compatible.
    pub fn geometry_diff(&self, other: &Self) -> Vec<String> {
        let mut d = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    d.push(format!("{}: {:?} vs {:?}", stringify!($f), self.$f, other.$f));
                }
            )*};
        }
        cmp!(
            image_size,
            patch_size,
            encoder_width,
            encoder_blocks,
            encoder_heads,
            encoder_mlp_ratio,
            window_size,
            global_attn_blocks,
            use_rel_pos,
            decoder_width,
            decoder_blocks,
            decoder_heads,
            decoder_mlp_dim,
            attention_downsample,
            iou_head_hidden,
            iou_head_depth,
            masks_per_prompt
        );
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::vit_b().validate().unwrap();
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(ModelConfig::vit_b().token_grid_shape(), (64, 64, 768));
        let mut c = ModelConfig::tiny();
        c.patch_size = 16;
        assert_eq!(c.token_grid_shape(), (4, 4, 32));
    }

    #[test]
    fn rejects_indivisible_patch() {
        let mut c = ModelConfig::tiny();
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.masks_per_prompt = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn geometry_diff_lists_fields() {
        let d = ModelConfig::tiny().geometry_diff(&ModelConfig::vit_b());
        assert!(d.iter().any(|l| l.starts_with("encoder_width")));
        assert!(ModelConfig::tiny().geometry_diff(&ModelConfig::tiny()).is_empty());
    }
}
