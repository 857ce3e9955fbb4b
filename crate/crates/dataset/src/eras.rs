//! On-disk tile dataset layout.
//!
//! ```text
//! <root>/images/<id>.tif    RGB, float32, 3 bands, georeferenced
//! <root>/masks/<id>.tif     instance ids, uint32, 1 band, 0 = background
//! <root>/index.csv          one row per tile, see `IndexRow`
//! <root>/manifest.json      dataset summary, see `DatasetManifest`
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use fieldsam_core::automask::GeoRef;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DataError, Result};
use crate::geotiff;
use crate::sample::{SampleMeta, SampleRecord, Source, YearQuarter};

pub const FORMAT: &str = "eras-tiles/1";
pub const INDEX_FILE: &str = "index.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// One row of `index.csv`. Bounds and EPSG are empty for tiles without a
/// georeference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub id: String,
    pub province: String,
    pub year_quarter: YearQuarter,
    pub source: Source,
    pub min_x: Option<f64>,
    pub min_y: Option<f64>,
    pub max_x: Option<f64>,
    pub max_y: Option<f64>,
    pub pixel_size: Option<f64>,
    pub epsg: Option<u32>,
    pub width: usize,
    pub height: usize,
    pub n_instances: usize,
    pub image_sha256: String,
    pub mask_sha256: String,
}

impl IndexRow {
    pub fn georef(&self) -> Option<GeoRef> {
        Some(GeoRef {
            origin_x: self.min_x?,
            origin_y: self.max_y?,
            pixel_size: self.pixel_size?,
            epsg: self.epsg,
        })
    }

    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            id: self.id.clone(),
            province: self.province.clone(),
            year_quarter: self.year_quarter,
            source: self.source,
            georef: self.georef(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub n_tiles: usize,
    pub n_instances: usize,
    /// Tile count per province.
    pub provinces: BTreeMap<String, usize>,
    pub index_sha256: String,
    /// Free-form build description, such as the build configuration.
    #[serde(default)]
    pub build: serde_json::Value,
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.tif"))
}

fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.tif"))
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.#".contains(c));
    if ok {
        Ok(())
    } else {
        Err(DataError::Input(format!("tile id {id:?} is not a safe file name")))
    }
}

/// Writes tiles into a fresh directory.
#[derive(Debug)]
pub struct ErasWriter {
    root: PathBuf,
    rows: Vec<IndexRow>,
}

impl ErasWriter {
    /// Fails if `root` exists and is not an empty directory.
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if root.exists() && std::fs::read_dir(&root)?.next().is_some() {
            return Err(DataError::Input(format!("{}: output directory is not empty", root.display())));
        }
        std::fs::create_dir_all(root.join("images"))?;
        std::fs::create_dir_all(root.join("masks"))?;
        Ok(Self { root, rows: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn rows(&self) -> &[IndexRow] {
        &self.rows
    }

    pub fn write(&mut self, record: &SampleRecord) -> Result<&IndexRow> {
        let meta = &record.meta;
        check_id(&meta.id)?;
        if self.rows.iter().any(|r| r.id == meta.id) {
            return Err(DataError::Input(format!("duplicate tile id {}", meta.id)));
        }
        let image = image_path(&self.root, &meta.id);
        let mask = mask_path(&self.root, &meta.id);
        geotiff::write_image(&image, &record.image, meta.georef.as_ref())?;
        geotiff::write_mask(&mask, &record.mask, meta.georef.as_ref())?;
        let (w, h) = record.size();
        let g = meta.georef.as_ref();
        self.rows.push(IndexRow {
            id: meta.id.clone(),
            province: meta.province.clone(),
            year_quarter: meta.year_quarter,
            source: meta.source,
            min_x: g.map(|g| g.origin_x),
            min_y: g.map(|g| g.origin_y - h as f64 * g.pixel_size),
            max_x: g.map(|g| g.origin_x + w as f64 * g.pixel_size),
            max_y: g.map(|g| g.origin_y),
            pixel_size: g.map(|g| g.pixel_size),
            epsg: g.and_then(|g| g.epsg),
            width: w,
            height: h,
            n_instances: record.n_instances(),
            image_sha256: sha256_file(&image)?,
            mask_sha256: sha256_file(&mask)?,
        });
        Ok(self.rows.last().expect("row just pushed"))
    }

    /// Writes the index and manifest.
    pub fn finish(self, build: serde_json::Value) -> Result<DatasetManifest> {
        let index = self.root.join(INDEX_FILE);
        let mut w = csv::Writer::from_path(&index)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        drop(w);
        if self.rows.is_empty() {
            // Header-only index for an empty dataset.
            std::fs::write(&index, index_header()?)?;
        }
        let mut provinces = BTreeMap::new();
        for r in &self.rows {
            *provinces.entry(r.province.clone()).or_insert(0) += 1;
        }
        let manifest = DatasetManifest {
            format: FORMAT.to_string(),
            n_tiles: self.rows.len(),
            n_instances: self.rows.iter().map(|r| r.n_instances).sum(),
            provinces,
            index_sha256: sha256_file(&index)?,
            build,
        };
        let f = File::create(self.root.join(MANIFEST_FILE))?;
        serde_json::to_writer_pretty(f, &manifest)?;
        Ok(manifest)
    }
}

fn index_header() -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "id",
        "province",
        "year_quarter",
        "source",
        "min_x",
        "min_y",
        "max_x",
        "max_y",
        "pixel_size",
        "epsg",
        "width",
        "height",
        "n_instances",
        "image_sha256",
        "mask_sha256",
    ])?;
    String::from_utf8(w.into_inner().map_err(|e| DataError::Io(e.into_error()))?)
        .map_err(|e| DataError::Input(e.to_string()))
}

/// Read access to a written dataset.
#[derive(Clone, Debug)]
pub struct ErasDataset {
    root: PathBuf,
    manifest: DatasetManifest,
    rows: Vec<IndexRow>,
}

impl ErasDataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest: DatasetManifest = serde_json::from_reader(
            File::open(&manifest_path)
                .map_err(|e| DataError::Input(format!("{}: {e}", manifest_path.display())))?,
        )?;
        if manifest.format != FORMAT {
            return Err(DataError::Input(format!(
                "{}: unsupported format {:?}",
                root.display(),
                manifest.format
            )));
        }
        let index = root.join(INDEX_FILE);
        if sha256_file(&index)? != manifest.index_sha256 {
            return Err(DataError::Input(format!("{}: index does not match manifest hash", index.display())));
        }
        let rows = csv::Reader::from_path(&index)?
            .deserialize()
            .collect::<std::result::Result<Vec<IndexRow>, _>>()?;
        if rows.len() != manifest.n_tiles {
            return Err(DataError::Input(format!(
                "{}: index lists {} tiles, manifest {}",
                root.display(),
                rows.len(),
                manifest.n_tiles
            )));
        }
        Ok(Self { root, manifest, rows })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn rows(&self) -> &[IndexRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn metas(&self) -> Vec<SampleMeta> {
        self.rows.iter().map(IndexRow::meta).collect()
    }

    /// Loads tile `i`, checking both files against their recorded hashes.
    pub fn load(&self, i: usize) -> Result<SampleRecord> {
        let row = self
            .rows
            .get(i)
            .ok_or_else(|| DataError::Input(format!("tile index {i} out of range ({})", self.rows.len())))?;
        let load = || -> Result<SampleRecord> {
            let image_file = image_path(&self.root, &row.id);
            let mask_file = mask_path(&self.root, &row.id);
            for (file, want) in [(&image_file, &row.image_sha256), (&mask_file, &row.mask_sha256)] {
                if sha256_file(file)? != *want {
                    return Err(DataError::Input(format!("{}: content hash mismatch", file.display())));
                }
            }
            let (image, _) = geotiff::read_image(&image_file)?;
            let (mask, _) = geotiff::read_mask(&mask_file, 0)?;
            SampleRecord::new(row.meta(), image, mask)
        };
        load().map_err(|e| e.in_tile(&row.id))
    }

    pub fn load_all(&self) -> Result<Vec<SampleRecord>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }

    /// Loads the tiles at the given positions.
    pub fn load_indices(&self, indices: &[usize]) -> Result<Vec<SampleRecord>> {
        indices.iter().map(|&i| self.load(i)).collect()
    }
}

/// Order-sensitive hash of a list of tile ids.
pub fn ids_hash<S: AsRef<str>>(ids: &[S]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_ref().as_bytes());
        h.update([b'\n']);
    }
    hex::encode(h.finalize())
}
