use std::path::{Path, PathBuf};

use clap::ValueEnum;
use fieldsam_core::metrics::EvalReport;
use fieldsam_data::eras::ErasDataset;
use serde::Serialize;
use serde_json::json;

use super::{evaluate_records, inference_model, load_for_model, open_split};
use crate::config::{check_fresh_output, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

pub const REPORT_FILE: &str = "eval_report.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    #[default]
    Val,
    /// Every tile, ignoring the split.
    All,
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub zero_shot: bool,
    pub subset: Subset,
}

pub fn run(cfg: &RunConfig, args: &EvalArgs) -> Result<EvalReport> {
    match (&args.checkpoint, args.zero_shot) {
        (Some(_), true) => return Err(CliError::Usage("--checkpoint and --zero-shot are exclusive".into())),
        (None, false) => return Err(CliError::Usage("give --checkpoint or --zero-shot".into())),
        _ => {}
    }
    if let Some(p) = args.checkpoint.as_ref().filter(|p| !p.is_file()) {
        return Err(CliError::Config(format!("checkpoint {} not found", p.display())));
    }
    cfg.validate()?;
    let out = cfg.output()?.to_path_buf();
    check_fresh_output(&out)?;
    let root = cfg.dataset()?;

    let mut manifest = RunManifest::start("eval", json!({"run": cfg, "checkpoint": args.checkpoint, "subset": args.subset}), cfg.seed);
    let (dataset, indices) = if args.subset == Subset::All {
        let ds = ErasDataset::open(root)?;
        let idx = (0..ds.len()).collect();
        (ds, idx)
    } else {
        let split = open_split(root, cfg.split()?)?;
        manifest.split = Some(split.hashes.clone());
        let idx = if args.subset == Subset::Train { split.train } else { split.val };
        (split.dataset, idx)
    };
    if indices.is_empty() {
        return Err(CliError::Runtime(format!("{:?} subset of {} is empty", args.subset, root.display())));
    }

    let model = inference_model(cfg, args.checkpoint.as_deref())?;
    manifest.trainable_params = Some(model.count_trainable());
    let records = load_for_model(&dataset, &indices, model.config().image_size)?;
    let report = evaluate_records(&model, &records, &cfg.automask, &cfg.eval)?;
    println!("{}", report.summary());

    std::fs::create_dir_all(&out)?;
    report.write_json(out.join(REPORT_FILE))?;
    manifest.results = json!({"map50": report.map50, "mar150": report.mar150, "n_images": report.n_images});
    manifest.finish(&out, &[REPORT_FILE.to_string()])?;
    Ok(report)
}

pub fn report_path(dir: &Path) -> PathBuf {
    dir.join(REPORT_FILE)
}
