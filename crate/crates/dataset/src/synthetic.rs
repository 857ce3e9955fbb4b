//! Synthetic fixtures: rectangle-field tiles and parcel layouts with
//! matching georeferenced rasters.

use std::path::Path;

use fieldsam_core::automask::GeoRef;
use fieldsam_core::{Image, InstanceMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{Bbox, Polygon};
use crate::geotiff;
use crate::parcels::ParcelRecord;
use crate::rasterize::pixel_center;
use crate::sample::{SampleMeta, SampleRecord, Source, YearQuarter, ER_PROVINCES};

/// Draws one `size × size` tile split into four axis-aligned rectangles:
/// a vertical cut at `cx`, then independent horizontal cuts `cy1` (left)
/// and `cy2` (right). Cuts are multiples of `size / 8` between 2/8 and 5/8.
/// Each field gets a random colour plus uniform noise of width 0.05.
pub fn rect_tile(size: usize, rng: &mut impl Rng) -> (Image, InstanceMask) {
    let unit = size / 8;
    let cx = unit * rng.random_range(2..6);
    let cy1 = unit * rng.random_range(2..6);
    let cy2 = unit * rng.random_range(2..6);
    let field = |x: usize, y: usize| -> usize {
        match (x < cx, if x < cx { y < cy1 } else { y < cy2 }) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        }
    };
    let colours: Vec<[f32; 3]> = (0..4).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let mut image = Image::zeros(size, size, 3);
    let mut mask = InstanceMask::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let f = field(x, y);
            for k in 0..3 {
                image.set(x, y, k, colours[f][k] + 0.05 * (rng.random::<f32>() - 0.5));
            }
            mask.set(x, y, f as u32 + 1);
        }
    }
    (image, mask)
}

/// `n` rectangle tiles from one seeded stream. Tile `i` is assigned
/// province `ER_PROVINCES[i % 9]` and alternates between 2024Q1 and 2023Q3.
pub fn rect_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (image, mask) = rect_tile(size, &mut rng);
            let meta = SampleMeta {
                id: format!("SYN-{i:04}"),
                province: ER_PROVINCES[i % ER_PROVINCES.len()].to_string(),
                year_quarter: if i % 2 == 0 {
                    YearQuarter::new(2024, 1)?
                } else {
                    YearQuarter::new(2023, 3)?
                },
                source: Source::S2,
                georef: Some(GeoRef {
                    origin_x: 600_000.0 + (i * size) as f64 * 10.0,
                    origin_y: 4_950_000.0,
                    pixel_size: 10.0,
                    epsg: Some(32632),
                }),
            };
            SampleRecord::new(meta, image, mask)
        })
        .collect()
}

/// `n` axis-aligned rectangular parcels with sides in `[min_side, max_side]`
/// metres placed uniformly inside `extent`. Parcels may overlap.
pub fn rect_parcels(n: usize, extent: &Bbox, min_side: f64, max_side: f64, rng: &mut impl Rng) -> Vec<ParcelRecord> {
    (0..n)
        .map(|i| {
            let w = rng.random_range(min_side..=max_side).min(extent.width());
            let h = rng.random_range(min_side..=max_side).min(extent.height());
            let x0 = extent.min_x + rng.random_range(0.0..=(extent.width() - w));
            let y0 = extent.min_y + rng.random_range(0.0..=(extent.height() - h));
            ParcelRecord {
                id: format!("p{i:05}"),
                category: "arable".into(),
                year: 2024,
                geometry: Polygon::rect(x0, y0, x0 + w, y0 + h),
            }
        })
        .collect()
}

/// Colour of a pixel at map position `(x, y)`: a per-parcel colour inside
/// the first parcel containing it, mid grey elsewhere.
pub fn parcel_colour(parcels: &[ParcelRecord], x: f64, y: f64) -> [f32; 3] {
    match parcels.iter().position(|p| p.geometry.contains(x, y)) {
        Some(i) => {
            let mut r = ChaCha8Rng::seed_from_u64(i as u64);
            [r.random(), r.random(), r.random()]
        }
        None => [0.5, 0.5, 0.5],
    }
}

/// Writes an RGB GeoTIFF covering `extent` at `resolution_m` that paints
/// each parcel in its own colour. `extent` is expanded to whole pixels.
pub fn write_parcel_raster(
    path: impl AsRef<Path>,
    parcels: &[ParcelRecord],
    extent: &Bbox,
    resolution_m: f64,
    epsg: Option<u32>,
) -> Result<GeoRef> {
    let w = (extent.width() / resolution_m).ceil().max(1.0) as usize;
    let h = (extent.height() / resolution_m).ceil().max(1.0) as usize;
    let georef = GeoRef {
        origin_x: extent.min_x,
        origin_y: extent.min_y + h as f64 * resolution_m,
        pixel_size: resolution_m,
        epsg,
    };
    let mut image = Image::zeros(w, h, 3);
    for row in 0..h {
        for col in 0..w {
            let [x, y] = pixel_center(&georef, col, row);
            for (k, v) in parcel_colour(parcels, x, y).into_iter().enumerate() {
                image.set(col, row, k, v);
            }
        }
    }
    geotiff::write_image(path, &image, Some(&georef))?;
    Ok(georef)
}
