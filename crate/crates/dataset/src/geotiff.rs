//! GeoTIFF reading and writing for tiles and instance maps.
//!
//! Only north-up rasters are handled: the georeference is read from and
//! written to `ModelPixelScale`, `ModelTiepoint` and the EPSG code in the
//! `GeoKeyDirectory` (projected key 3072, geographic key 2048).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use fieldsam_core::automask::GeoRef;
use fieldsam_core::{Image, InstanceMask};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;

use crate::error::{DataError, Result};

const KEY_MODEL_TYPE: u16 = 1024;
const KEY_RASTER_TYPE: u16 = 1025;
const KEY_GEOGRAPHIC_TYPE: u16 = 2048;
const KEY_PROJECTED_TYPE: u16 = 3072;

/// Band-interleaved samples of any TIFF, widened to f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub data: Vec<f32>,
    pub georef: Option<GeoRef>,
}

impl Raster {
    pub fn band(&self, b: usize) -> Vec<f32> {
        self.data.iter().skip(b).step_by(self.bands).copied().collect()
    }

    /// The first three bands as an RGB image.
    pub fn to_rgb(&self) -> Result<Image> {
        self.select_bands(&[0, 1, 2])
    }

    pub fn select_bands(&self, bands: &[usize]) -> Result<Image> {
        if let Some(b) = bands.iter().find(|b| **b >= self.bands) {
            return Err(DataError::Input(format!("band {b} requested from a {}-band raster", self.bands)));
        }
        let mut out = Vec::with_capacity(self.width * self.height * bands.len());
        for px in self.data.chunks_exact(self.bands) {
            out.extend(bands.iter().map(|&b| px[b]));
        }
        Ok(Image::new(self.width, self.height, bands.len(), out)?)
    }

    /// One band as an instance map; values must be non-negative integers.
    pub fn to_instance_mask(&self, band: usize) -> Result<InstanceMask> {
        if band >= self.bands {
            return Err(DataError::Input(format!("band {band} requested from a {}-band raster", self.bands)));
        }
        let ids = self
            .band(band)
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32 {
                    Ok(v as u32)
                } else {
                    Err(DataError::Input(format!("instance band holds non-integer value {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InstanceMask::from_vec(self.width, self.height, ids)?)
    }
}

fn widen(r: DecodingResult) -> Result<Vec<f32>> {
    Ok(match r {
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::F16(v) => v.into_iter().map(|x| x.to_f32()).collect(),
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
    })
}

fn read_georef<R: std::io::Read + std::io::Seek>(dec: &mut Decoder<R>) -> Option<GeoRef> {
    let scale = dec.get_tag_f64_vec(Tag::ModelPixelScaleTag).ok()?;
    let tie = dec.get_tag_f64_vec(Tag::ModelTiepointTag).ok()?;
    if scale.len() < 2 || tie.len() < 6 {
        return None;
    }
    if (scale[0] - scale[1]).abs() > 1e-9 * scale[0].abs() {
        log::warn!("non-square pixels ({} x {}); using the x size", scale[0], scale[1]);
    }
    let epsg = dec.get_tag_u16_vec(Tag::GeoKeyDirectoryTag).ok().and_then(|keys| {
        keys.get(4..)?.chunks_exact(4).find_map(|k| {
            ((k[0] == KEY_PROJECTED_TYPE || k[0] == KEY_GEOGRAPHIC_TYPE) && k[1] == 0).then_some(k[3] as u32)
        })
    });
    Some(GeoRef {
        origin_x: tie[3] - tie[0] * scale[0],
        origin_y: tie[4] + tie[1] * scale[1],
        pixel_size: scale[0],
        epsg,
    })
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let err = |e: tiff::TiffError| DataError::tiff(path, e);
    let file = File::open(path).map_err(|e| DataError::tiff(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(err)?.with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().map_err(err)?;
    let bands = dec.colortype().map_err(err)?.num_samples() as usize;
    let georef = read_georef(&mut dec);
    let data = widen(dec.read_image().map_err(err)?)?;
    let (width, height) = (w as usize, h as usize);
    if data.len() != width * height * bands {
        return Err(DataError::tiff(
            path,
            format!("decoded {} samples for {width}x{height}x{bands}", data.len()),
        ));
    }
    Ok(Raster { width, height, bands, data, georef })
}

/// RGB image plus georeference.
pub fn read_image(path: impl AsRef<Path>) -> Result<(Image, Option<GeoRef>)> {
    let r = read_raster(path)?;
    Ok((r.to_rgb()?, r.georef.clone()))
}

/// Instance map from the given band plus georeference.
pub fn read_mask(path: impl AsRef<Path>, band: usize) -> Result<(InstanceMask, Option<GeoRef>)> {
    let r = read_raster(path)?;
    Ok((r.to_instance_mask(band)?, r.georef.clone()))
}

fn write_georef<W: std::io::Write + std::io::Seek, K: tiff::encoder::TiffKind>(
    dir: &mut tiff::encoder::DirectoryEncoder<'_, W, K>,
    g: &GeoRef,
) -> tiff::TiffResult<()> {
    dir.write_tag(Tag::ModelPixelScaleTag, &[g.pixel_size, g.pixel_size, 0.0][..])?;
    dir.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, g.origin_x, g.origin_y, 0.0][..])?;
    let mut keys: Vec<u16> = vec![1, 1, 0, 0];
    keys.extend([KEY_MODEL_TYPE, 0, 1, 1, KEY_RASTER_TYPE, 0, 1, 1]);
    if let Some(code) = g.epsg.and_then(|c| u16::try_from(c).ok()) {
        keys.extend([KEY_PROJECTED_TYPE, 0, 1, code]);
    }
    keys[3] = ((keys.len() - 4) / 4) as u16;
    dir.write_tag(Tag::GeoKeyDirectoryTag, &keys[..])
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes a 3-band float32 image.
pub fn write_image(path: impl AsRef<Path>, image: &Image, georef: Option<&GeoRef>) -> Result<()> {
    if image.channels() != 3 {
        return Err(DataError::Input(format!("expected 3 bands, got {}", image.channels())));
    }
    write_f32_bands(path, image.width(), image.height(), 3, image.data(), georef)
}

/// Writes interleaved float32 samples with 1, 3 or 4 bands.
pub fn write_f32_bands(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    bands: usize,
    data: &[f32],
    georef: Option<&GeoRef>,
) -> Result<()> {
    let path = path.as_ref();
    if data.len() != width * height * bands {
        return Err(DataError::Input(format!(
            "{} samples for a {width}x{height}x{bands} raster",
            data.len()
        )));
    }
    let err = |e: tiff::TiffError| DataError::tiff(path, e);
    let mut enc = TiffEncoder::new(create(path)?).map_err(err)?;
    let (w, h) = (width as u32, height as u32);
    macro_rules! write_as {
        ($ct:ty) => {{
            let mut img = enc.new_image::<$ct>(w, h).map_err(err)?;
            if let Some(g) = georef {
                write_georef(img.encoder(), g).map_err(err)?;
            }
            img.write_data(data).map_err(err)
        }};
    }
    match bands {
        1 => write_as!(colortype::Gray32Float),
        3 => write_as!(colortype::RGB32Float),
        4 => write_as!(colortype::RGBA32Float),
        n => Err(DataError::Input(format!("cannot write a {n}-band float raster"))),
    }
}

/// Writes an instance map as single-band uint32.
pub fn write_mask(path: impl AsRef<Path>, mask: &InstanceMask, georef: Option<&GeoRef>) -> Result<()> {
    let path = path.as_ref();
    let err = |e: tiff::TiffError| DataError::tiff(path, e);
    let mut enc = TiffEncoder::new(create(path)?).map_err(err)?;
    let mut img = enc
        .new_image::<colortype::Gray32>(mask.width() as u32, mask.height() as u32)
        .map_err(err)?;
    if let Some(g) = georef {
        write_georef(img.encoder(), g).map_err(err)?;
    }
    img.write_data(mask.as_slice()).map_err(err)
}
