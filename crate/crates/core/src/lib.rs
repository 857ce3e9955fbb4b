//! Promptable parcel segmentation with low-rank fine-tuning.

pub mod automask;
pub mod checkpoint;
pub mod error;
pub mod image;
pub mod lora;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod prompting;
pub mod segmenter;
pub mod training;

pub use error::{Error, Result};
pub use image::{Image, Normalization};
pub use lora::{LoraPair, LoraSpec, LoraTarget};
pub use mask::{BinaryMask, InstanceMask, Rle};
pub use prompting::{PointLabel, PromptPoint, PromptSet};
pub use segmenter::{
    ComponentCounts, DecoderMode, FinetuneMode, ImageTokens, MaskOutput, ModelConfig, Preset,
    Segmenter,
};
