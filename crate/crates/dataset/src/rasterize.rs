//! Burning parcel polygons into per-tile instance maps.

use fieldsam_core::automask::GeoRef;
use fieldsam_core::InstanceMask;

use crate::error::{DataError, Result};
use crate::parcels::ParcelRecord;
use crate::tiling::TilePlan;

/// Map coordinates of the centre of pixel `(col, row)` in a north-up grid.
pub fn pixel_center(g: &GeoRef, col: usize, row: usize) -> [f64; 2] {
    [
        g.origin_x + (col as f64 + 0.5) * g.pixel_size,
        g.origin_y - (row as f64 + 0.5) * g.pixel_size,
    ]
}

/// Pixel count along a tile side; `resolution_m` must divide the side.
pub fn tile_pixels(side_m: f64, resolution_m: f64) -> Result<usize> {
    if !(resolution_m.is_finite() && resolution_m > 0.0) {
        return Err(DataError::Config(format!("resolution must be positive, got {resolution_m}")));
    }
    let n = (side_m / resolution_m).round();
    if n < 1.0 || (n * resolution_m - side_m).abs() > 1e-6 * side_m {
        return Err(DataError::Config(format!(
            "resolution {resolution_m} m does not divide tile side {side_m} m"
        )));
    }
    Ok(n as usize)
}

/// Georeference of a tile's pixel grid.
pub fn tile_georef(tile: &TilePlan, resolution_m: f64, epsg: Option<u32>) -> GeoRef {
    let b = tile.bounds();
    GeoRef {
        origin_x: b.min_x,
        origin_y: b.max_y,
        pixel_size: resolution_m,
        epsg,
    }
}

/// Instance map of one tile plus the parcel behind each instance id.
#[derive(Clone, Debug, PartialEq)]
pub struct Rasterized {
    pub mask: InstanceMask,
    /// `parcel_ids[k - 1]` is the parcel burned as instance `k`.
    pub parcel_ids: Vec<String>,
    pub georef: GeoRef,
}

/// Burns every parcel intersecting the tile. A pixel belongs to a parcel
/// when its centre lies inside the polygon; where parcels overlap the
/// larger one wins, ties going to the smaller id. Instance ids are dense
/// from 1 in burn order; parcels that cover no pixel centre get no id.
pub fn rasterize(tile: &TilePlan, parcels: &[ParcelRecord], resolution_m: f64, epsg: Option<u32>) -> Result<Rasterized> {
    let n = tile_pixels(tile.side_m, resolution_m)?;
    let georef = tile_georef(tile, resolution_m, epsg);
    let bounds = tile.bounds();
    let mut order: Vec<&ParcelRecord> = parcels.iter().filter(|p| p.geometry.bbox().intersects(&bounds)).collect();
    order.sort_by(|a, b| b.area().total_cmp(&a.area()).then_with(|| a.id.cmp(&b.id)));

    let mut ids = vec![0u32; n * n];
    let mut parcel_ids = Vec::new();
    for p in order {
        let b = p.geometry.bbox();
        let col0 = ((b.min_x - georef.origin_x) / resolution_m - 0.5).ceil().max(0.0) as usize;
        let col1 = ((b.max_x - georef.origin_x) / resolution_m - 0.5).floor().min(n as f64 - 1.0);
        let row0 = ((georef.origin_y - b.max_y) / resolution_m - 0.5).ceil().max(0.0) as usize;
        let row1 = ((georef.origin_y - b.min_y) / resolution_m - 0.5).floor().min(n as f64 - 1.0);
        if col1 < 0.0 || row1 < 0.0 {
            continue;
        }
        let next = parcel_ids.len() as u32 + 1;
        let mut burned = false;
        for row in row0..=row1 as usize {
            for col in col0..=col1 as usize {
                let cell = &mut ids[row * n + col];
                if *cell != 0 {
                    continue;
                }
                let [x, y] = pixel_center(&georef, col, row);
                if p.geometry.contains(x, y) {
                    *cell = next;
                    burned = true;
                }
            }
        }
        if burned {
            parcel_ids.push(p.id.clone());
        }
    }
    Ok(Rasterized {
        mask: InstanceMask::from_vec(n, n, ids)?,
        parcel_ids,
        georef,
    })
}
