//! Reader for AI4Boundaries Sentinel-2 tiles exported as GeoTIFF.
//!
//! Expected layout under `root`:
//!
//! ```text
//! sentinel2/images/<CC>/<tile>_S2_10m_256_<YYYY>-<MM>.tif   monthly composite
//! sentinel2/masks/<CC>/<tile>_S2label_10m_256.tif           label stack
//! ```
//!
//! `<CC>` is the country code. The label stack carries extent, boundary,
//! distance and enumeration bands; the enumeration band holds field ids.

use std::path::{Path, PathBuf};

use fieldsam_core::InstanceMask;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::geotiff;
use crate::sample::{SampleMeta, SampleRecord, Source, YearQuarter};

const MASK_SUFFIX: &str = "_S2label_10m_256.tif";
const IMAGE_INFIX: &str = "_S2_10m_256_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ai4bConfig {
    pub year: i32,
    /// Month of the composite to read, 3 (March) to 8 (August).
    pub month: u8,
    /// Image bands mapped to R, G, B.
    pub rgb_bands: [usize; 3],
    /// Label band holding field ids.
    pub mask_band: usize,
    /// Percentage of unreadable tiles tolerated before failing.
    pub max_skipped_pct: f64,
}

impl Default for Ai4bConfig {
    fn default() -> Self {
        Self {
            year: 2019,
            month: 5,
            rgb_bands: [0, 1, 2],
            mask_band: 3,
            max_skipped_pct: 5.0,
        }
    }
}

impl Ai4bConfig {
    pub fn validate(&self) -> Result<()> {
        if !(3..=8).contains(&self.month) {
            return Err(DataError::Config(format!(
                "AI4B composites cover March to August, got month {}",
                self.month
            )));
        }
        if !(0.0..=100.0).contains(&self.max_skipped_pct) {
            return Err(DataError::Config("max_skipped_pct must lie in [0, 100]".into()));
        }
        Ok(())
    }
}

/// One discovered tile. The image may be missing on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ai4bEntry {
    pub tile: String,
    pub country: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

impl Ai4bEntry {
    pub fn load(&self, cfg: &Ai4bConfig) -> Result<SampleRecord> {
        let raster = geotiff::read_raster(&self.image)?;
        let image = raster.select_bands(&cfg.rgb_bands)?;
        let (mask, _) = geotiff::read_mask(&self.mask, cfg.mask_band)?;
        let meta = SampleMeta {
            id: self.tile.clone(),
            province: self.country.clone(),
            year_quarter: YearQuarter::from_month(cfg.year, cfg.month)?,
            source: Source::S2,
            georef: raster.georef,
        };
        SampleRecord::new(meta, image, mask)
    }
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Lists every labelled tile, sorted by country then tile name.
pub fn discover(root: impl AsRef<Path>, cfg: &Ai4bConfig) -> Result<Vec<Ai4bEntry>> {
    let root = root.as_ref();
    let masks = root.join("sentinel2").join("masks");
    let images = root.join("sentinel2").join("images");
    if !masks.is_dir() {
        return Err(DataError::Input(format!("{}: no sentinel2/masks directory", root.display())));
    }
    let month = format!("{:04}-{:02}", cfg.year, cfg.month);
    let mut entries = Vec::new();
    for country_dir in sorted_dir(&masks)?.into_iter().filter(|p| p.is_dir()) {
        let country = country_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for mask in sorted_dir(&country_dir)? {
            let name = mask.file_name().unwrap_or_default().to_string_lossy();
            let Some(tile) = name.strip_suffix(MASK_SUFFIX) else {
                continue;
            };
            let image = images.join(&country).join(format!("{tile}{IMAGE_INFIX}{month}.tif"));
            entries.push(Ai4bEntry {
                tile: tile.to_string(),
                country: country.clone(),
                image,
                mask,
            });
        }
    }
    if entries.is_empty() {
        return Err(DataError::Input(format!("{}: no AI4B label tiles found", root.display())));
    }
    Ok(entries)
}

/// Lazily loads discovered tiles, skipping unreadable ones with a warning.
/// Yields `TooManySkipped` and stops once the skipped share exceeds the
/// configured limit.
#[derive(Debug)]
pub struct Ai4bReader {
    entries: Vec<Ai4bEntry>,
    cfg: Ai4bConfig,
    next: usize,
    skipped: usize,
    failed: bool,
}

impl Ai4bReader {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Ai4bEntry] {
        &self.entries
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn over_limit(&self) -> bool {
        self.skipped as f64 * 100.0 > self.cfg.max_skipped_pct * self.entries.len() as f64
    }
}

impl Iterator for Ai4bReader {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        while let Some(entry) = self.entries.get(self.next) {
            self.next += 1;
            match entry.load(&self.cfg) {
                Ok(r) => return Some(Ok(r)),
                Err(e) => {
                    log::warn!("skipping AI4B tile {}/{}: {e}", entry.country, entry.tile);
                    self.skipped += 1;
                    if self.over_limit() {
                        self.failed = true;
                        return Some(Err(DataError::TooManySkipped {
                            skipped: self.skipped,
                            total: self.entries.len(),
                            limit_pct: self.cfg.max_skipped_pct,
                        }));
                    }
                }
            }
        }
        None
    }
}

pub fn read_ai4b(root: impl AsRef<Path>, cfg: &Ai4bConfig) -> Result<Ai4bReader> {
    cfg.validate()?;
    Ok(Ai4bReader {
        entries: discover(root, cfg)?,
        cfg: cfg.clone(),
        next: 0,
        skipped: 0,
        failed: false,
    })
}

/// Extent, boundary, distance and enumeration bands for an instance map.
/// Boundary pixels touch a 4-neighbour with a different id; distance is
/// the city-block distance to the nearest boundary or background pixel.
pub fn label_stack(mask: &InstanceMask) -> Vec<f32> {
    let (w, h) = (mask.width(), mask.height());
    let id = |x: usize, y: usize| mask.get(x, y);
    let mut boundary = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = id(x, y);
            let differs = (x > 0 && id(x - 1, y) != v)
                || (x + 1 < w && id(x + 1, y) != v)
                || (y > 0 && id(x, y - 1) != v)
                || (y + 1 < h && id(x, y + 1) != v);
            boundary[y * w + x] = v != 0 && differs;
        }
    }
    let mut dist: Vec<u32> = (0..w * h)
        .map(|i| if mask.as_slice()[i] == 0 || boundary[i] { 0 } else { u32::MAX })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x > 0 {
                dist[i] = dist[i].min(dist[i - 1].saturating_add(1));
            }
            if y > 0 {
                dist[i] = dist[i].min(dist[i - w].saturating_add(1));
            }
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let i = y * w + x;
            if x + 1 < w {
                dist[i] = dist[i].min(dist[i + 1].saturating_add(1));
            }
            if y + 1 < h {
                dist[i] = dist[i].min(dist[i + w].saturating_add(1));
            }
        }
    }
    let mut out = Vec::with_capacity(w * h * 4);
    for i in 0..w * h {
        let v = mask.as_slice()[i];
        let d = if dist[i] == u32::MAX { 0.0 } else { dist[i] as f32 };
        out.extend([(v != 0) as u8 as f32, boundary[i] as u8 as f32, d, v as f32]);
    }
    out
}

/// Writes one tile in the layout `discover` expects.
pub fn write_tile(
    root: impl AsRef<Path>,
    country: &str,
    tile: &str,
    cfg: &Ai4bConfig,
    record: &SampleRecord,
) -> Result<()> {
    let root = root.as_ref().join("sentinel2");
    let month = format!("{:04}-{:02}", cfg.year, cfg.month);
    let image = root.join("images").join(country).join(format!("{tile}{IMAGE_INFIX}{month}.tif"));
    let mask = root.join("masks").join(country).join(format!("{tile}{MASK_SUFFIX}"));
    let georef = record.meta.georef.as_ref();
    geotiff::write_image(image, &record.image, georef)?;
    let (w, h) = record.size();
    geotiff::write_f32_bands(mask, w, h, 4, &label_stack(&record.mask), georef)
}
