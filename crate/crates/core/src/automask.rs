//! Automatic instance prediction: grid prompting, confidence filtering and
//! mask non-maximum suppression.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Rle};
use crate::metrics::mask_iou;
use crate::prompting::{grid_prompts, PromptPoint};
use crate::segmenter::Segmenter;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutomaskConfig {
    pub grid_n: usize,
    /// Minimum predicted IoU for a mask to be kept.
    pub conf_thresh: f64,
    /// Masks overlapping a kept mask at this IoU or more are suppressed.
    pub nms_iou: f64,
    /// Grid points decoded per forward pass.
    pub points_per_batch: usize,
}

impl Default for AutomaskConfig {
    fn default() -> Self {
        Self {
            grid_n: 32,
            conf_thresh: 0.88,
            nms_iou: 0.7,
            points_per_batch: 64,
        }
    }
}

impl AutomaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n == 0 || self.points_per_batch == 0 {
            return Err(Error::Config("grid_n and points_per_batch must be positive".into()));
        }
        if !self.conf_thresh.is_finite() || !self.nms_iou.is_finite() {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictedInstance {
    pub mask: BinaryMask,
    pub score: f64,
    pub source_prompt: PromptPoint,
}

/// Best-scoring candidate per grid point, binarized, with empty masks and
/// low-confidence masks removed. Order follows the grid.
pub fn candidates(model: &Segmenter, image: &Tensor, cfg: &AutomaskConfig) -> Result<Vec<PredictedInstance>> {
    cfg.validate()?;
    let size = model.config().image_size;
    let tokens = model.encode_image(image)?;
    let grid = grid_prompts(size, cfg.grid_n)?.split_points();
    let mut out = Vec::new();
    for chunk in grid.chunks(cfg.points_per_batch) {
        let emb = model.encode_prompts(chunk)?;
        let res = model.decode_masks(&tokens, &emb)?;
        let scores = res.scores()?;
        for (b, row) in scores.iter().enumerate() {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            let score = row[best] as f64;
            if score < cfg.conf_thresh {
                continue;
            }
            let mask = res.binary(b, best)?;
            if mask.is_empty() {
                continue;
            }
            out.push(PredictedInstance {
                mask,
                score,
                source_prompt: chunk[b].points[0],
            });
        }
    }
    Ok(out)
}

/// Greedy suppression over instances sorted by descending score: an
/// instance survives iff its IoU with every survivor so far is below
/// `iou_thresh`.
pub fn mask_nms(instances: Vec<PredictedInstance>, iou_thresh: f64) -> Result<Vec<PredictedInstance>> {
    if instances.windows(2).any(|w| w[0].score < w[1].score) {
        return Err(Error::Input("mask_nms needs instances sorted by descending score".into()));
    }
    let mut kept: Vec<PredictedInstance> = Vec::new();
    for inst in instances {
        let mut keep = true;
        for k in &kept {
            if mask_iou(&inst.mask, &k.mask)? >= iou_thresh {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push(inst);
        }
    }
    Ok(kept)
}

/// Stable sort by descending score.
pub fn sort_by_score(instances: &mut [PredictedInstance]) {
    instances.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Full automatic pipeline on one normalized `(3, S, S)` image.
pub fn generate(model: &Segmenter, image: &Tensor, cfg: &AutomaskConfig) -> Result<Vec<PredictedInstance>> {
    let mut c = candidates(model, image, cfg)?;
    sort_by_score(&mut c);
    mask_nms(c, cfg.nms_iou)
}

/// Pixel-to-map transform of a north-up tile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoRef {
    /// Map coordinates of the top-left corner of pixel (0, 0).
    pub origin_x: f64,
    pub origin_y: f64,
    /// Ground size of one pixel in map units.
    pub pixel_size: f64,
    pub epsg: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub score: f64,
    pub point: [f32; 2],
    pub area: usize,
    pub rle: Rle,
}

/// Per-tile prediction file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePrediction {
    pub tile_id: String,
    pub width: usize,
    pub height: usize,
    pub georef: Option<GeoRef>,
    pub instances: Vec<InstanceRecord>,
}

impl TilePrediction {
    pub fn new(tile_id: impl Into<String>, size: (usize, usize), georef: Option<GeoRef>, preds: &[PredictedInstance]) -> Self {
        Self {
            tile_id: tile_id.into(),
            width: size.0,
            height: size.1,
            georef,
            instances: preds
                .iter()
                .map(|p| InstanceRecord {
                    score: p.score,
                    point: [p.source_prompt.x, p.source_prompt.y],
                    area: p.mask.count(),
                    rle: p.mask.to_rle(),
                })
                .collect(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn masks(&self) -> Result<Vec<BinaryMask>> {
        self.instances.iter().map(|i| i.rle.decode()).collect()
    }
}
