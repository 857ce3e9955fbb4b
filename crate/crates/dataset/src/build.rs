//! End-to-end tile dataset construction from parcels and rasters.
//!
//! Per province: read and filter parcels, plan tiles, rasterize the parcels
//! of each tile, resample every acquisition onto the tile grid, composite
//! them band-wise and write the result.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fieldsam_core::automask::GeoRef;
use fieldsam_core::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composite::{Acquisition, ObservationStack, QuartileRule};
use crate::eras::{DatasetManifest, ErasWriter};
use crate::error::{DataError, Result};
use crate::geotiff::{self, Raster};
use crate::parcels::{filter_parcels, read_geojson, FieldNames, DEFAULT_EXCLUSIONS};
use crate::rasterize::{pixel_center, rasterize, tile_pixels};
use crate::sample::{SampleMeta, SampleRecord, Source, YearQuarter};
use crate::tiling::{plan_tiles, PlanConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvinceInput {
    pub code: String,
    /// GeoJSON feature collection of parcels.
    pub parcels: PathBuf,
    /// Acquisitions over the quarter, composited per pixel.
    pub rasters: Vec<PathBuf>,
}

fn default_exclusions() -> Vec<String> {
    DEFAULT_EXCLUSIONS.iter().map(|s| s.to_string()).collect()
}

fn default_resolution() -> f64 {
    10.0
}

fn default_source() -> Source {
    Source::S2
}

fn default_rgb() -> [usize; 3] {
    [0, 1, 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    pub output: PathBuf,
    pub year_quarter: YearQuarter,
    #[serde(default = "default_source")]
    pub source: Source,
    #[serde(default = "default_resolution")]
    pub resolution_m: f64,
    #[serde(default)]
    pub epsg: Option<u32>,
    #[serde(default = "default_exclusions")]
    pub exclusions: Vec<String>,
    #[serde(default)]
    pub fields: FieldNames,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub quartile_rule: QuartileRule,
    /// Raster value marking missing data, in addition to non-finite values.
    #[serde(default)]
    pub nodata: Option<f32>,
    /// Raster bands mapped to R, G, B.
    #[serde(default = "default_rgb")]
    pub rgb_bands: [usize; 3],
    #[serde(default)]
    pub seed: u64,
    pub provinces: Vec<ProvinceInput>,
}

impl BuildConfig {
    /// Resolves relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        for prov in &mut self.provinces {
            fix(&mut prov.parcels);
            prov.rasters.iter_mut().for_each(fix);
        }
    }

    /// Checks values and that every input file exists.
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        tile_pixels(self.plan.tile_side_m, self.resolution_m)?;
        if self.provinces.is_empty() {
            return Err(DataError::Config("no provinces configured".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.provinces {
            if p.code.is_empty() || !p.code.chars().all(|c| c.is_ascii_alphanumeric()) {
                return Err(DataError::Config(format!("province code {:?} must be alphanumeric", p.code)));
            }
            if !seen.insert(&p.code) {
                return Err(DataError::Config(format!("province {} listed twice", p.code)));
            }
            if p.rasters.is_empty() {
                return Err(DataError::Config(format!("province {} has no rasters", p.code)));
            }
            for f in std::iter::once(&p.parcels).chain(&p.rasters) {
                if !f.is_file() {
                    return Err(DataError::Config(format!("province {}: missing file {}", p.code, f.display())));
                }
            }
        }
        if self.nodata.is_some_and(|v| v.is_nan()) {
            return Err(DataError::Config("nodata must not be NaN; non-finite values are always invalid".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProvinceSummary {
    pub parcels_read: usize,
    pub parcels_kept: usize,
    pub tiles: usize,
    pub instances: usize,
    /// Tile pixels with no valid observation in any acquisition.
    pub nodata_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub provinces: BTreeMap<String, ProvinceSummary>,
    pub manifest: DatasetManifest,
}

/// Nearest-neighbour resampling of `raster` onto a north-up grid of
/// `n × n` pixels. Pixels outside the raster are flagged invalid.
pub fn sample_onto_grid(raster: &Raster, grid: &GeoRef, n: usize, bands: &[usize], nodata: Option<f32>) -> Result<Acquisition> {
    let src = raster
        .georef
        .as_ref()
        .ok_or_else(|| DataError::Input("raster has no georeference".into()))?;
    if let (Some(a), Some(b)) = (src.epsg, grid.epsg) {
        if a != b {
            return Err(DataError::Input(format!("raster EPSG:{a} differs from target EPSG:{b}")));
        }
    }
    if let Some(b) = bands.iter().find(|b| **b >= raster.bands) {
        return Err(DataError::Input(format!("band {b} requested from a {}-band raster", raster.bands)));
    }
    let mut data = Vec::with_capacity(n * n * bands.len());
    for row in 0..n {
        for col in 0..n {
            let [x, y] = pixel_center(grid, col, row);
            let c = ((x - src.origin_x) / src.pixel_size).floor();
            let r = ((src.origin_y - y) / src.pixel_size).floor();
            if c >= 0.0 && r >= 0.0 && (c as usize) < raster.width && (r as usize) < raster.height {
                let base = (r as usize * raster.width + c as usize) * raster.bands;
                data.extend(bands.iter().map(|&b| raster.data[base + b]));
            } else {
                data.extend(bands.iter().map(|_| f32::NAN));
            }
        }
    }
    Ok(Acquisition::from_image(Image::new(n, n, bands.len(), data)?, nodata))
}

/// Builds the whole dataset into `cfg.output`. The stored build description
/// omits the output path so that identical inputs give identical manifests.
pub fn build_dataset(cfg: &BuildConfig) -> Result<BuildSummary> {
    cfg.validate()?;
    let mut writer = ErasWriter::create(&cfg.output)?;
    let n = tile_pixels(cfg.plan.tile_side_m, cfg.resolution_m)?;
    let mut summaries = BTreeMap::new();
    for (pi, prov) in cfg.provinces.iter().enumerate() {
        let ctx = |e: DataError| e.in_tile(format!("{} (province)", prov.code));
        let parcels = read_geojson(&prov.parcels, &cfg.fields).map_err(ctx)?;
        let read = parcels.len();
        let (parcels, report) = filter_parcels(parcels, &cfg.exclusions);
        for (id, why) in &report.rejected {
            log::info!("{}: dropped parcel {id}: {why:?}", prov.code);
        }
        let rasters = prov
            .rasters
            .iter()
            .map(geotiff::read_raster)
            .collect::<Result<Vec<_>>>()
            .map_err(ctx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(pi as u64);
        let tiles = plan_tiles(&parcels, &prov.code, &cfg.plan, &mut rng).map_err(ctx)?;
        let mut summary = ProvinceSummary {
            parcels_read: read,
            parcels_kept: parcels.len(),
            ..Default::default()
        };
        for tile in &tiles {
            let build_tile = || -> Result<(SampleRecord, usize)> {
                let burned = rasterize(tile, &parcels, cfg.resolution_m, cfg.epsg)?;
                let mut stack = ObservationStack::new();
                for r in &rasters {
                    stack.push(sample_onto_grid(r, &burned.georef, n, &cfg.rgb_bands, cfg.nodata)?)?;
                }
                let comp = stack.composite(cfg.quartile_rule, 0.0)?;
                let meta = SampleMeta {
                    id: tile.id.clone(),
                    province: prov.code.clone(),
                    year_quarter: cfg.year_quarter,
                    source: cfg.source,
                    georef: Some(burned.georef),
                };
                Ok((SampleRecord::new(meta, comp.image, burned.mask)?, comp.nodata.count()))
            };
            let (record, nodata) = build_tile().map_err(|e| e.in_tile(&tile.id))?;
            writer.write(&record).map_err(|e| e.in_tile(&tile.id))?;
            summary.tiles += 1;
            summary.instances += record.n_instances();
            summary.nodata_pixels += nodata;
        }
        log::info!(
            "{}: {} parcels kept of {}, {} tiles",
            prov.code,
            summary.parcels_kept,
            summary.parcels_read,
            summary.tiles
        );
        summaries.insert(prov.code.clone(), summary);
    }
    let mut build = serde_json::to_value(cfg)?;
    if let Some(obj) = build.as_object_mut() {
        obj.remove("output");
    }
    let manifest = writer.finish(build)?;
    Ok(BuildSummary {
        provinces: summaries,
        manifest,
    })
}
