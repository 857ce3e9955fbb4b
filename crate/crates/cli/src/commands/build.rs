use std::path::Path;

use fieldsam_data::build::{build_dataset, BuildConfig, BuildSummary};
use fieldsam_data::eras::{INDEX_FILE, MANIFEST_FILE};
use serde_json::json;

use crate::config::{check_fresh_output, read_toml};
use crate::error::Result;
use crate::manifest::RunManifest;

pub struct BuildArgs<'a> {
    pub config: &'a Path,
    pub seed: Option<u64>,
    pub output: Option<&'a Path>,
}

pub fn run(args: &BuildArgs) -> Result<BuildSummary> {
    let mut cfg: BuildConfig = read_toml(args.config)?;
    cfg.resolve_paths(args.config.parent().unwrap_or(Path::new("")));
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.output {
        cfg.output = o.to_path_buf();
    }
    cfg.validate()?;
    check_fresh_output(&cfg.output)?;

    let manifest = RunManifest::start("build-dataset", serde_json::to_value(&cfg)?, cfg.seed);
    let summary = build_dataset(&cfg)?;
    for (code, s) in &summary.provinces {
        println!(
            "{code}: {} of {} parcels kept, {} tiles, {} instances, {} no-data pixels",
            s.parcels_kept, s.parcels_read, s.tiles, s.instances, s.nodata_pixels
        );
    }
    println!(
        "total: {} tiles, {} instances -> {}",
        summary.manifest.n_tiles,
        summary.manifest.n_instances,
        cfg.output.display()
    );

    let mut manifest = manifest;
    manifest.results = json!({
        "provinces": summary.provinces,
        "n_tiles": summary.manifest.n_tiles,
        "n_instances": summary.manifest.n_instances,
    });
    manifest.finish(&cfg.output, &[INDEX_FILE.to_string(), MANIFEST_FILE.to_string()])?;
    Ok(summary)
}
