use std::path::{Path, PathBuf};

use candle_core::Device;
use fieldsam_core::automask::{generate, TilePrediction};
use fieldsam_data::geotiff;
use fieldsam_data::resize::resize_bilinear;
use serde_json::json;

use super::inference_model;
use crate::config::{check_fresh_output, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

pub struct PredictArgs {
    pub checkpoint: Option<PathBuf>,
    /// A GeoTIFF tile or a directory of them.
    pub input: PathBuf,
    /// Raster bands mapped to R, G, B.
    pub rgb_bands: [usize; 3],
}

fn is_tif(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("tif") || e.eq_ignore_ascii_case("tiff"))
}

/// Input tiles in name order.
pub fn list_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(CliError::Config(format!("input {} not found", input.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| is_tif(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!("no .tif tiles in {}", input.display())));
    }
    Ok(files)
}

fn tile_id(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

/// Writes one `<tile>.json` per input tile and returns the written names.
pub fn run(cfg: &RunConfig, args: &PredictArgs) -> Result<Vec<String>> {
    if let Some(p) = args.checkpoint.as_ref().filter(|p| !p.is_file()) {
        return Err(CliError::Config(format!("checkpoint {} not found", p.display())));
    }
    cfg.validate()?;
    let out = cfg.output()?.to_path_buf();
    check_fresh_output(&out)?;
    let inputs = list_inputs(&args.input)?;
    let mut names: Vec<String> = inputs.iter().map(|p| format!("{}.json", tile_id(p))).collect();
    names.sort();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Config("input tiles share a file stem".into()));
    }

    let mut manifest = RunManifest::start(
        "predict",
        json!({"run": cfg, "checkpoint": args.checkpoint, "input": args.input, "rgb_bands": args.rgb_bands}),
        cfg.seed,
    );
    let model = inference_model(cfg, args.checkpoint.as_deref())?;
    manifest.trainable_params = Some(model.count_trainable());
    let size = model.config().image_size;
    std::fs::create_dir_all(&out)?;
    let mut written = Vec::with_capacity(inputs.len());
    for path in &inputs {
        let id = tile_id(path);
        let raster = geotiff::read_raster(path)?;
        if raster.width != raster.height {
            return Err(CliError::Runtime(format!(
                "{}: tile is {}x{}, expected a square tile",
                path.display(),
                raster.width,
                raster.height
            )));
        }
        let image = raster.select_bands(&args.rgb_bands)?;
        let mut georef = raster.georef.clone();
        let image = if raster.width == size {
            image
        } else {
            if let Some(g) = &mut georef {
                g.pixel_size *= raster.width as f64 / size as f64;
            }
            resize_bilinear(&image, size, size)
        };
        let tensor = model.config().normalization.apply(&image)?.to_tensor(&Device::Cpu)?;
        let preds = generate(&model, &tensor, &cfg.automask)?;
        let name = format!("{id}.json");
        TilePrediction::new(id, (size, size), georef, &preds).write(out.join(&name))?;
        println!("{}: {} instances", path.display(), preds.len());
        written.push(name);
    }
    manifest.results = json!({"n_tiles": written.len()});
    manifest.finish(&out, &written)?;
    Ok(written)
}
