pub mod build;
pub mod count;
pub mod eval;
pub mod predict;
pub mod train;

use std::path::Path;

use candle_core::Device;
use fieldsam_core::automask::{generate, AutomaskConfig};
use fieldsam_core::checkpoint::{load_lora, load_model, Checkpoint};
use fieldsam_core::metrics::{evaluate, EvalOptions, EvalReport, ImageEval};
use fieldsam_core::Segmenter;
use fieldsam_data::eras::ErasDataset;
use fieldsam_data::resize::resize_for_model;
use fieldsam_data::split::split_indices;
use fieldsam_data::{SampleRecord, SplitScheme};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::SplitHashes;

/// The model to run inference with: the configured base, optionally with an
/// adapter or full checkpoint on top.
pub fn inference_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Segmenter> {
    let Some(path) = checkpoint else {
        return cfg.model.build();
    };
    if Checkpoint::read(path)?.is_lora() {
        let mut model = cfg.model.build()?;
        load_lora(&mut model, path)?;
        Ok(model)
    } else {
        Ok(load_model(path)?.0)
    }
}

/// Opened dataset with its train and validation positions.
pub struct SplitData {
    pub dataset: ErasDataset,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub hashes: SplitHashes,
}

pub fn open_split(root: &Path, scheme: &SplitScheme) -> Result<SplitData> {
    let dataset = ErasDataset::open(root)?;
    let metas = dataset.metas();
    let (train, val) = split_indices(&metas, scheme)?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| metas[i].id.clone()).collect::<Vec<_>>();
    let hashes = SplitHashes::new(scheme, &ids(&train), &ids(&val));
    Ok(SplitData {
        dataset,
        train,
        val,
        hashes,
    })
}

/// Loads tiles and brings them to the model input size.
pub fn load_for_model(dataset: &ErasDataset, indices: &[usize], size: usize) -> Result<Vec<SampleRecord>> {
    indices
        .iter()
        .map(|&i| Ok(resize_for_model(&dataset.load(i)?, size)?))
        .collect()
}

/// Runs automatic prediction on every record and scores it against its
/// instance map.
pub fn evaluate_records(
    model: &Segmenter,
    records: &[SampleRecord],
    automask: &AutomaskConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(CliError::Runtime("no tiles to evaluate".into()));
    }
    let device = Device::Cpu;
    let norm = &model.config().normalization;
    let mut images = Vec::with_capacity(records.len());
    for r in records {
        let sample = r.to_train_sample(norm, &device)?;
        let preds = generate(model, &sample.image, automask)?;
        log::debug!("{}: {} instances predicted", r.meta.id, preds.len());
        images.push(ImageEval {
            image_id: r.meta.id.clone(),
            scores: preds.iter().map(|p| p.score).collect(),
            preds: preds.into_iter().map(|p| p.mask).collect(),
            gts: sample.instances,
        });
    }
    Ok(evaluate(&images, opts)?)
}
