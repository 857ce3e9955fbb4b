//! Tile planning: k-means over parcel area, one fixed-size square per centroid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::geometry::{Bbox, Coord};
use crate::parcels::ParcelRecord;

pub const TILE_SIDE_M: f64 = 2560.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    /// Tile count is this factor times parcel area over tile area.
    pub coverage_factor: f64,
    pub tile_side_m: f64,
    /// Spacing of the sampling lattice (100 m is one point per hectare).
    pub sample_spacing_m: f64,
    /// Centroids are rounded to this grid so tile edges fall on pixel edges.
    pub snap_m: Option<f64>,
    pub max_iter: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            coverage_factor: 1.10,
            tile_side_m: TILE_SIDE_M,
            sample_spacing_m: 100.0,
            snap_m: Some(10.0),
            max_iter: 100,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.coverage_factor) || !positive(self.tile_side_m) || !positive(self.sample_spacing_m) {
            return Err(DataError::Config("coverage factor, tile side and sample spacing must be positive".into()));
        }
        if self.snap_m.is_some_and(|s| !positive(s)) {
            return Err(DataError::Config("snap must be positive".into()));
        }
        Ok(())
    }

    pub fn tile_area_m2(&self) -> f64 {
        self.tile_side_m * self.tile_side_m
    }
}

/// A square tile centred on a planned centroid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub id: String,
    pub province: String,
    pub centroid: Coord,
    pub side_m: f64,
}

impl TilePlan {
    pub fn bounds(&self) -> Bbox {
        Bbox::square(self.centroid[0], self.centroid[1], self.side_m)
    }
}

/// `ceil(coverage_factor * total_area / tile_area)`.
pub fn cluster_count(total_area_m2: f64, cfg: &PlanConfig) -> Result<usize> {
    if !(total_area_m2.is_finite() && total_area_m2 > 0.0) {
        return Err(DataError::Input(format!("total parcel area must be positive, got {total_area_m2}")));
    }
    Ok((cfg.coverage_factor * total_area_m2 / cfg.tile_area_m2()).ceil() as usize)
}

/// A weighted sample point; the weight is the area it stands for (m²).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedPoint {
    pub xy: Coord,
    pub weight: f64,
}

/// Lattice points at `((i + 0.5) s, (j + 0.5) s)` falling inside each
/// parcel, each standing for `s²`. A parcel that contains no lattice point
/// contributes its centroid weighted by its area.
pub fn sample_points(parcels: &[ParcelRecord], spacing: f64) -> Vec<WeightedPoint> {
    let mut out = Vec::new();
    for p in parcels {
        let b = p.geometry.bbox();
        let i0 = (b.min_x / spacing - 0.5).ceil() as i64;
        let i1 = (b.max_x / spacing - 0.5).floor() as i64;
        let j0 = (b.min_y / spacing - 0.5).ceil() as i64;
        let j1 = (b.max_y / spacing - 0.5).floor() as i64;
        let before = out.len();
        for j in j0..=j1 {
            for i in i0..=i1 {
                let (x, y) = ((i as f64 + 0.5) * spacing, (j as f64 + 0.5) * spacing);
                if p.geometry.contains(x, y) {
                    out.push(WeightedPoint { xy: [x, y], weight: spacing * spacing });
                }
            }
        }
        if out.len() == before {
            if let Some(c) = p.geometry.centroid() {
                out.push(WeightedPoint { xy: c, weight: p.area() });
            }
        }
    }
    out
}

fn dist2(a: Coord, b: Coord) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn pick_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.random_range(0..weights.len());
    }
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Weighted k-means with k-means++ seeding and Lloyd iterations. An empty
/// cluster is re-seeded at the point with the largest weighted distance to
/// its centre.
pub fn kmeans(points: &[WeightedPoint], k: usize, max_iter: usize, rng: &mut impl Rng) -> Result<Vec<Coord>> {
    if k == 0 || points.is_empty() {
        return Err(DataError::Input("k-means needs k > 0 and at least one point".into()));
    }
    let mut centres = vec![points[pick_weighted(&points.iter().map(|p| p.weight).collect::<Vec<_>>(), rng)].xy];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p.xy, centres[0])).collect();
    while centres.len() < k {
        let w: Vec<f64> = points.iter().zip(&d2).map(|(p, d)| p.weight * d).collect();
        let c = points[pick_weighted(&w, rng)].xy;
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p.xy, c));
        }
        centres.push(c);
    }

    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centres.iter().enumerate() {
                let d = dist2(p.xy, *c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0f64; 3]; k];
        for (a, p) in assign.iter().zip(points) {
            sums[*a][0] += p.weight * p.xy[0];
            sums[*a][1] += p.weight * p.xy[1];
            sums[*a][2] += p.weight;
        }
        for ci in 0..k {
            if sums[ci][2] > 0.0 {
                centres[ci] = [sums[ci][0] / sums[ci][2], sums[ci][1] / sums[ci][2]];
            } else {
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        let di = points[i].weight * dist2(points[i].xy, centres[assign[i]]);
                        let dj = points[j].weight * dist2(points[j].xy, centres[assign[j]]);
                        di.total_cmp(&dj)
                    })
                    .unwrap_or(0);
                centres[ci] = points[far].xy;
                assign[far] = ci;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centres)
}

/// Plans tiles for one province: `K = ceil(coverage · area / tile_area)`
/// k-means centroids over the parcel area, one square tile per centroid.
/// Tiles may overlap.
pub fn plan_tiles(
    parcels: &[ParcelRecord],
    province: &str,
    cfg: &PlanConfig,
    rng: &mut impl Rng,
) -> Result<Vec<TilePlan>> {
    cfg.validate()?;
    let total: f64 = parcels.iter().map(ParcelRecord::area).sum();
    let k = cluster_count(total, cfg)?;
    let points = sample_points(parcels, cfg.sample_spacing_m);
    let mut centres = kmeans(&points, k, cfg.max_iter, rng)?;
    if let Some(s) = cfg.snap_m {
        for c in &mut centres {
            *c = [(c[0] / s).round() * s, (c[1] / s).round() * s];
        }
    }
    centres.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    Ok(centres
        .into_iter()
        .enumerate()
        .map(|(i, c)| TilePlan {
            id: format!("{province}-{i:04}"),
            province: province.to_string(),
            centroid: c,
            side_m: cfg.tile_side_m,
        })
        .collect())
}
