//! Run configuration read from TOML, with command-line overrides.
//!
//! ```toml
//! output = "runs/tiny"
//! seed = 0
//!
//! [model]
//! preset = "tiny"
//!
//! [data]
//! dataset = "data/eras"
//! split = "province_holdout:RE"
//!
//! [train]
//! peak_lr = 1e-3
//! finetune_mode = { decoder = "lora" }
//! ```
//!
//! Unknown keys are rejected in every section. Relative paths are resolved
//! against the directory holding the file.

use std::path::{Path, PathBuf};

use fieldsam_core::automask::AutomaskConfig;
use fieldsam_core::metrics::EvalOptions;
use fieldsam_core::training::TrainConfig;
use fieldsam_core::{ModelConfig, Preset, Segmenter};
use fieldsam_data::augment::AugmentConfig;
use fieldsam_data::SplitScheme;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    /// Seed of the random base weights when no base checkpoint is given.
    pub init_seed: u64,
    /// Full model checkpoint used as the frozen base.
    pub base_checkpoint: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            init_seed: 0,
            base_checkpoint: None,
        }
    }
}

impl ModelSection {
    /// Builds the base model: the checkpoint when one is named, otherwise
    /// random weights from `init_seed`.
    pub fn build(&self) -> Result<Segmenter> {
        match &self.base_checkpoint {
            Some(path) => {
                let (model, report) = fieldsam_core::checkpoint::load_model(path)?;
                if model.config().preset != self.preset {
                    return Err(CliError::Config(format!(
                        "base checkpoint {} has preset {}, config asks for {}",
                        path.display(),
                        model.config().preset,
                        self.preset
                    )));
                }
                if !report.missing.is_empty() {
                    log::warn!("base checkpoint lacks {} parameters", report.missing.len());
                }
                Ok(model)
            }
            None => Ok(Segmenter::new(ModelConfig::preset(self.preset), self.init_seed)?),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Tile dataset directory written by `build-dataset`.
    pub dataset: Option<PathBuf>,
    pub split: Option<SplitScheme>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output: Option<PathBuf>,
    pub seed: u64,
    /// Adapter checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub automask: AutomaskConfig,
    pub eval: EvalOptions,
}

/// Values given on the command line that replace config keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub split: Option<SplitScheme>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub grid_n: Option<usize>,
    pub conf_thresh: Option<f64>,
    pub nms_iou: Option<f64>,
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|source| CliError::Toml {
        path: path.display().to_string(),
        source,
    })
}

fn resolve(p: &mut Option<PathBuf>, base: &Path) {
    if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
        *path = base.join(&*path);
    }
}

impl RunConfig {
    /// Reads `path`, or starts from defaults when `None`, then applies the
    /// overrides.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let mut cfg: RunConfig = read_toml(p)?;
                let base = p.parent().unwrap_or(Path::new(""));
                resolve(&mut cfg.output, base);
                resolve(&mut cfg.resume, base);
                resolve(&mut cfg.model.base_checkpoint, base);
                resolve(&mut cfg.data.dataset, base);
                cfg
            }
            None => RunConfig::default(),
        };
        cfg.apply(ov);
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(p) = ov.preset {
            self.model.preset = p;
        }
        if let Some(s) = &ov.split {
            self.data.split = Some(s.clone());
        }
        if let Some(d) = &ov.dataset {
            self.data.dataset = Some(d.clone());
        }
        if let Some(o) = &ov.output {
            self.output = Some(o.clone());
        }
        if let Some(g) = ov.grid_n {
            self.automask.grid_n = g;
        }
        if let Some(c) = ov.conf_thresh {
            self.automask.conf_thresh = c;
        }
        if let Some(n) = ov.nms_iou {
            self.automask.nms_iou = n;
        }
    }

    /// Checks every section that does not touch the file system.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        self.automask.validate()?;
        if !(0.0..=1.0).contains(&self.eval.iou_thresh) {
            return Err(CliError::Config(format!("eval.iou_thresh {} outside [0, 1]", self.eval.iou_thresh)));
        }
        if self.eval.max_det == 0 {
            return Err(CliError::Config("eval.max_det must be positive".into()));
        }
        if let Some(p) = &self.model.base_checkpoint {
            if !p.is_file() {
                return Err(CliError::Config(format!("base checkpoint {} not found", p.display())));
            }
        }
        if let Some(p) = &self.resume {
            if !p.is_file() {
                return Err(CliError::Config(format!("resume checkpoint {} not found", p.display())));
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<&Path> {
        self.data
            .dataset
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset given (data.dataset or --dataset)".into()))
    }

    pub fn split(&self) -> Result<&SplitScheme> {
        self.data
            .split
            .as_ref()
            .ok_or_else(|| CliError::Config("no split given (data.split or --split)".into()))
    }

    pub fn output(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory given (output or --output)".into()))
    }
}

/// Fails unless `dir` is missing or an empty directory.
pub fn check_fresh_output(dir: &Path) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Config(format!("output {} is not a directory", dir.display())));
        }
        if std::fs::read_dir(dir)?.next().is_some() {
            return Err(CliError::Config(format!("output directory {} is not empty", dir.display())));
        }
    }
    Ok(())
}
