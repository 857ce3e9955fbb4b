//! Safetensors checkpoints for full models and for adapter-only deltas.
//!
//! Full checkpoints hold every registered parameter under its dotted name.
//! Adapter checkpoints hold, per adapted projection `p`, the tensors
//! `p.lora_a`, `p.lora_b`, `p.lora_scaling` (f32, shape `[1]`) and
//! `p.lora_rank` (u32, shape `[1]`), plus every other trainable weight
//! (the whole decoder when it is fully fine-tuned). Both kinds carry the
//! model configuration and fine-tune state as JSON metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lora::factor_names;
use crate::segmenter::{FinetuneState, ModelConfig, Segmenter};

pub const MODEL_FORMAT: &str = "fieldsam-model/1";
pub const LORA_FORMAT: &str = "fieldsam-lora/1";

const KEY_FORMAT: &str = "format";
const KEY_CONFIG: &str = "config";
const KEY_FINETUNE: &str = "finetune";

/// Keys present on one side only after a load.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    /// Model parameters that the file did not provide.
    pub missing: Vec<String>,
    /// File tensors that matched no model parameter.
    pub unexpected: Vec<String>,
}

enum Blob {
    F32(Vec<usize>, Vec<u8>),
    U32(Vec<usize>, Vec<u8>),
}

fn f32_blob(t: &Tensor) -> Result<Blob> {
    let v = t.flatten_all()?.to_vec1::<f32>()?;
    let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    Ok(Blob::F32(t.dims().to_vec(), bytes))
}

fn write(path: &Path, blobs: BTreeMap<String, Blob>, meta: HashMap<String, String>) -> Result<()> {
    let mut views = Vec::with_capacity(blobs.len());
    for (name, blob) in &blobs {
        let view = match blob {
            Blob::F32(shape, data) => TensorView::new(Dtype::F32, shape.clone(), data),
            Blob::U32(shape, data) => TensorView::new(Dtype::U32, shape.clone(), data),
        }
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
        views.push((name.clone(), view));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(views, Some(meta), path)
        .map_err(|e| Error::checkpoint(path, e.to_string()))
}

fn base_meta(format: &str, model: &Segmenter) -> Result<HashMap<String, String>> {
    let mut meta = HashMap::new();
    meta.insert(KEY_FORMAT.into(), format.into());
    meta.insert(KEY_CONFIG.into(), serde_json::to_string(model.config())?);
    if let Some(ft) = model.finetune() {
        meta.insert(KEY_FINETUNE.into(), serde_json::to_string(ft)?);
    }
    Ok(meta)
}

/// Writes every parameter of `model`.
pub fn save_model(model: &Segmenter, path: impl AsRef<Path>) -> Result<()> {
    let mut blobs = BTreeMap::new();
    for p in model.params().iter() {
        blobs.insert(p.name().to_string(), f32_blob(&p.snapshot()?)?);
    }
    write(path.as_ref(), blobs, base_meta(MODEL_FORMAT, model)?)
}

/// Writes the adapters and every other trainable weight of `model`.
pub fn save_lora(model: &Segmenter, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let Some(ft) = model.finetune() else {
        return Err(Error::checkpoint(path, "model has not been configured for fine-tuning"));
    };
    let mut blobs = BTreeMap::new();
    for proj in &ft.adapted {
        let (an, bn) = factor_names(proj);
        let a = model.params().get(&an).ok_or_else(|| Error::checkpoint(path, format!("missing {an}")))?;
        let b = model.params().get(&bn).ok_or_else(|| Error::checkpoint(path, format!("missing {bn}")))?;
        blobs.insert(an, f32_blob(&a.snapshot()?)?);
        blobs.insert(bn, f32_blob(&b.snapshot()?)?);
        let s = (ft.spec.scaling as f32).to_le_bytes().to_vec();
        blobs.insert(format!("{proj}.lora_scaling"), Blob::F32(vec![1], s));
        let r = (a.dims()[0] as u32).to_le_bytes().to_vec();
        blobs.insert(format!("{proj}.lora_rank"), Blob::U32(vec![1], r));
    }
    for p in model.params().iter().filter(|p| p.is_trainable()) {
        if !blobs.contains_key(p.name()) {
            blobs.insert(p.name().to_string(), f32_blob(&p.snapshot()?)?);
        }
    }
    write(path, blobs, base_meta(LORA_FORMAT, model)?)
}

/// Parsed checkpoint file.
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub finetune: Option<FinetuneState>,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        let (_, header) =
            SafeTensors::read_metadata(&bytes).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let format = meta
            .get(KEY_FORMAT)
            .cloned()
            .ok_or_else(|| Error::checkpoint(path, "missing format tag"))?;
        if format != MODEL_FORMAT && format != LORA_FORMAT {
            return Err(Error::checkpoint(path, format!("unsupported format {format:?}")));
        }
        let config: ModelConfig = serde_json::from_str(
            meta.get(KEY_CONFIG)
                .ok_or_else(|| Error::checkpoint(path, "missing model config"))?,
        )?;
        let finetune = match meta.get(KEY_FINETUNE) {
            Some(s) => Some(serde_json::from_str(s)?),
            None => None,
        };
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = match view.dtype() {
                Dtype::F32 => {
                    let v: Vec<f32> = view
                        .data()
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Tensor::from_vec(v, view.shape(), &Device::Cpu)?
                }
                Dtype::U32 => {
                    let v: Vec<u32> = view
                        .data()
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Tensor::from_vec(v, view.shape(), &Device::Cpu)?
                }
                other => {
                    return Err(Error::checkpoint(path, format!("{name}: unsupported dtype {other:?}")))
                }
            };
            tensors.insert(name, t);
        }
        Ok(Self {
            format,
            config,
            finetune,
            tensors,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn is_lora(&self) -> bool {
        self.format == LORA_FORMAT
    }
}

fn check_geometry(path: &Path, model: &ModelConfig, file: &ModelConfig) -> Result<()> {
    let diff = model.geometry_diff(file);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::checkpoint(
            path,
            format!("geometry mismatch (model vs file): {}", diff.join("; ")),
        ))
    }
}

/// Builds a model from a full checkpoint, restoring its fine-tune state.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Segmenter, LoadReport)> {
    let path = path.as_ref();
    let ck = Checkpoint::read(path)?;
    if ck.is_lora() {
        return Err(Error::checkpoint(path, "adapter checkpoint given where a full model was expected"));
    }
    let mut model = Segmenter::zeroed(ck.config.clone())?;
    if let Some(ft) = &ck.finetune {
        model.configure_finetune(ft.mode, &ft.spec)?;
    }
    let report = assign_all(&model, &ck, path, false)?;
    Ok((model, report))
}

/// Loads a full checkpoint into an existing model of the same geometry.
pub fn load_into(model: &Segmenter, path: impl AsRef<Path>) -> Result<LoadReport> {
    let path = path.as_ref();
    let ck = Checkpoint::read(path)?;
    if ck.is_lora() {
        return Err(Error::checkpoint(path, "adapter checkpoint given where a full model was expected"));
    }
    check_geometry(path, model.config(), &ck.config)?;
    assign_all(model, &ck, path, false)
}

/// Layers an adapter checkpoint over `model`. An unconfigured model is first
/// configured with the fine-tune mode stored in the file.
pub fn load_lora(model: &mut Segmenter, path: impl AsRef<Path>) -> Result<LoadReport> {
    let path = path.as_ref();
    let ck = Checkpoint::read(path)?;
    if !ck.is_lora() {
        return Err(Error::checkpoint(path, "not an adapter checkpoint"));
    }
    check_geometry(path, model.config(), &ck.config)?;
    let Some(file_ft) = &ck.finetune else {
        return Err(Error::checkpoint(path, "adapter checkpoint without fine-tune state"));
    };
    match model.finetune() {
        None => model.configure_finetune(file_ft.mode, &file_ft.spec)?,
        Some(ft) => {
            if ft.spec.rank != file_ft.spec.rank {
                return Err(Error::checkpoint(
                    path,
                    format!("rank mismatch: model {} vs file {}", ft.spec.rank, file_ft.spec.rank),
                ));
            }
            if ft.mode != file_ft.mode || ft.adapted != file_ft.adapted {
                return Err(Error::checkpoint(path, "fine-tune mode or adapted projections differ"));
            }
        }
    }
    for proj in &file_ft.adapted {
        let key = format!("{proj}.lora_rank");
        let r = ck
            .tensor(&key)
            .ok_or_else(|| Error::checkpoint(path, format!("missing {key}")))?
            .to_vec1::<u32>()?;
        if r.first().copied() != Some(file_ft.spec.rank as u32) {
            return Err(Error::checkpoint(path, format!("{key} disagrees with the stored spec")));
        }
    }
    assign_all(model, &ck, path, true)
}

fn assign_all(model: &Segmenter, ck: &Checkpoint, path: &Path, partial: bool) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut mismatched = Vec::new();
    for (name, t) in &ck.tensors {
        if name.ends_with(".lora_scaling") || name.ends_with(".lora_rank") {
            continue;
        }
        match model.params().get(name) {
            Some(p) if p.dims() == t.dims() => {
                p.assign(t)?;
                report.loaded += 1;
            }
            Some(p) => mismatched.push(format!("{name}: model {:?} vs file {:?}", p.dims(), t.dims())),
            None => report.unexpected.push(name.clone()),
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::checkpoint(path, format!("shape mismatch: {}", mismatched.join("; "))));
    }
    if !partial {
        report.missing = model
            .params()
            .iter()
            .map(|p| p.name().to_string())
            .filter(|n| !ck.tensors.contains_key(n))
            .collect();
    }
    if !report.unexpected.is_empty() {
        log::warn!("{}: {} unexpected tensors", path.display(), report.unexpected.len());
    }
    Ok(report)
}
