//! Instance-segmentation evaluation: mask IoU, greedy matching, AP and AR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// `|a ∩ b| / |a ∪ b|`, defined as 1 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.union_count(b)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Pairwise IoU table, `table[p][g]`.
pub fn iou_table(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<Vec<Vec<f64>>> {
    preds
        .iter()
        .map(|p| gts.iter().map(|g| mask_iou(p, g)).collect())
        .collect()
}

/// Result of matching one image's predictions against its ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// For each prediction (in input order), the matched gt index.
    pub pred_to_gt: Vec<Option<usize>>,
    /// IoU of each matched pair, aligned with `pred_to_gt`.
    pub matched_iou: Vec<Option<f64>>,
    pub n_gt: usize,
}

impl Matching {
    pub fn tp(&self) -> usize {
        self.pred_to_gt.iter().filter(|m| m.is_some()).count()
    }

    pub fn fp(&self) -> usize {
        self.pred_to_gt.len() - self.tp()
    }

    pub fn fn_(&self) -> usize {
        self.n_gt - self.tp()
    }
}

/// Greedy one-to-one matching over a precomputed IoU table. Predictions are
/// visited in the given order (highest score first); each claims the
/// unclaimed ground truth with the highest IoU at or above `thresh`, ties
/// going to the lowest gt index.
pub fn match_table(table: &[Vec<f64>], n_gt: usize, thresh: f64) -> Matching {
    let mut claimed = vec![false; n_gt];
    let mut pred_to_gt = Vec::with_capacity(table.len());
    let mut matched_iou = Vec::with_capacity(table.len());
    for row in table {
        let mut best: Option<(usize, f64)> = None;
        for (g, &iou) in row.iter().enumerate() {
            if claimed[g] || iou < thresh {
                continue;
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) => {
                claimed[g] = true;
                pred_to_gt.push(Some(g));
                matched_iou.push(Some(iou));
            }
            None => {
                pred_to_gt.push(None);
                matched_iou.push(None);
            }
        }
    }
    Matching {
        pred_to_gt,
        matched_iou,
        n_gt,
    }
}

/// Matches predictions (sorted by descending score) against ground truth.
pub fn match_instances(preds: &[BinaryMask], gts: &[BinaryMask], thresh: f64) -> Result<Matching> {
    Ok(match_table(&iou_table(preds, gts)?, gts.len(), thresh))
}

/// Precision interpolation used by [`average_precision`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Exact area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean of the envelope sampled at recall 0, 0.01, ..., 1.
    Coco101,
}

/// One scored detection pooled across a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredHit {
    pub score: f64,
    pub tp: bool,
}

/// Average precision of pooled detections against `n_gt` ground-truth
/// instances. Detections are ranked by descending score; equal scores keep
/// their input order.
pub fn average_precision(hits: &[ScoredHit], n_gt: usize, interp: ApInterpolation) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::Input("average precision is undefined without ground truth".into()));
    }
    let mut order: Vec<usize> = (0..hits.len()).collect();
    order.sort_by(|&a, &b| hits[b].score.total_cmp(&hits[a].score));
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if hits[i].tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    Ok(match interp {
        ApInterpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                ap += (r - prev_r) * p;
                prev_r = *r;
            }
            ap
        }
        ApInterpolation::Coco101 => {
            let mut sum = 0.0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                let i = recall.partition_point(|&x| x < r - 1e-12);
                sum += precision.get(i).copied().unwrap_or(0.0);
            }
            sum / 101.0
        }
    })
}

/// How average recall treats IoU thresholds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// Recall at IoU 0.5.
    #[default]
    Iou50,
    /// Recall averaged over IoU 0.50, 0.55, ..., 0.95.
    IouRange,
}

/// Predictions and ground truth for one image. Predictions must be sorted by
/// descending score.
#[derive(Clone, Debug)]
pub struct ImageEval {
    pub image_id: String,
    pub preds: Vec<BinaryMask>,
    pub scores: Vec<f64>,
    pub gts: Vec<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub iou_thresh: f64,
    pub max_det: usize,
    pub ap_interpolation: ApInterpolation,
    pub recall_mode: RecallMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            max_det: 150,
            ap_interpolation: ApInterpolation::AllPoint,
            recall_mode: RecallMode::Iou50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub matched_ious: Vec<f64>,
    /// Recall over the top `max_det` predictions, `None` without ground truth.
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map50: f64,
    pub mar150: f64,
    pub options: EvalOptions,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    pub per_image: Vec<ImageResult>,
}

fn check_sorted(scores: &[f64], what: &str) -> Result<()> {
    if scores.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Input(format!("{what}: predictions are not sorted by descending score")));
    }
    Ok(())
}

/// Matches every image, pools detections for AP and averages capped recall.
pub fn evaluate(images: &[ImageEval], opts: &EvalOptions) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let mut hits = Vec::new();
    let mut per_image = Vec::with_capacity(images.len());
    let (mut n_gt, mut n_pred) = (0, 0);
    let mut recall_sum = 0.0;
    let mut recall_n = 0usize;
    for img in images {
        if img.preds.len() != img.scores.len() {
            return Err(Error::Input(format!(
                "{}: {} masks but {} scores",
                img.image_id,
                img.preds.len(),
                img.scores.len()
            )));
        }
        check_sorted(&img.scores, &img.image_id)?;
        let table = iou_table(&img.preds, &img.gts)?;
        let m = match_table(&table, img.gts.len(), opts.iou_thresh);
        for (s, g) in img.scores.iter().zip(&m.pred_to_gt) {
            hits.push(ScoredHit {
                score: *s,
                tp: g.is_some(),
            });
        }
        n_gt += img.gts.len();
        n_pred += img.preds.len();

        let capped = &table[..img.preds.len().min(opts.max_det)];
        let recall = if img.gts.is_empty() {
            None
        } else {
            let r = match opts.recall_mode {
                RecallMode::Iou50 => {
                    match_table(capped, img.gts.len(), 0.5).tp() as f64 / img.gts.len() as f64
                }
                RecallMode::IouRange => {
                    let mut s = 0.0;
                    for k in 0..10 {
                        let t = 0.5 + 0.05 * k as f64;
                        s += match_table(capped, img.gts.len(), t).tp() as f64 / img.gts.len() as f64;
                    }
                    s / 10.0
                }
            };
            recall_sum += r;
            recall_n += 1;
            Some(r)
        };
        per_image.push(ImageResult {
            image_id: img.image_id.clone(),
            tp: m.tp(),
            fp: m.fp(),
            fn_: m.fn_(),
            matched_ious: m.matched_iou.iter().flatten().copied().collect(),
            recall,
        });
    }
    let map50 = average_precision(&hits, n_gt, opts.ap_interpolation)?;
    let mar150 = if recall_n == 0 { 0.0 } else { recall_sum / recall_n as f64 };
    Ok(EvalReport {
        map50,
        mar150,
        options: opts.clone(),
        n_images: images.len(),
        n_gt,
        n_pred,
        per_image,
    })
}

impl EvalReport {
    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        let tp: usize = self.per_image.iter().map(|r| r.tp).sum();
        let fp: usize = self.per_image.iter().map(|r| r.fp).sum();
        let fn_: usize = self.per_image.iter().map(|r| r.fn_).sum();
        let mut s = String::new();
        s.push_str(&format!("{:<10} {:>10}\n", "metric", "value"));
        s.push_str(&format!("{:<10} {:>10.2}\n", "mAP50", 100.0 * self.map50));
        s.push_str(&format!(
            "{:<10} {:>10.2}\n",
            format!("mAR{}", self.options.max_det),
            100.0 * self.mar150
        ));
        s.push_str(&format!("{:<10} {:>10}\n", "images", self.n_images));
        s.push_str(&format!("{:<10} {:>10}\n", "gt", self.n_gt));
        s.push_str(&format!("{:<10} {:>10}\n", "pred", self.n_pred));
        s.push_str(&format!("{:<10} {:>10}\n", "tp", tp));
        s.push_str(&format!("{:<10} {:>10}\n", "fp", fp));
        s.push_str(&format!("{:<10} {:>10}\n", "fn", fn_));
        s
    }

    pub fn write_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
