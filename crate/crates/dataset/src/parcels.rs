//! Parcel records, GeoJSON feature I/O and filtering.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{DataError, Result};
use crate::geometry::{Coord, Polygon};

/// One declared agricultural parcel in a projected CRS (meters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParcelRecord {
    pub id: String,
    pub category: String,
    pub year: i32,
    pub geometry: Polygon,
}

impl ParcelRecord {
    pub fn area(&self) -> f64 {
        self.geometry.area()
    }
}

/// Categories excluded by default.
pub const DEFAULT_EXCLUSIONS: &[&str] = &["non-agricultural land", "landscape element"];

fn parse_ring(v: &Value) -> Result<Vec<Coord>> {
    let pts = v.as_array().ok_or_else(|| DataError::Input("ring is not an array".into()))?;
    let mut ring = pts
        .iter()
        .map(|p| {
            let xy = p.as_array().filter(|a| a.len() >= 2);
            let xy = xy.ok_or_else(|| DataError::Input("position needs two numbers".into()))?;
            match (xy[0].as_f64(), xy[1].as_f64()) {
                (Some(x), Some(y)) => Ok([x, y]),
                _ => Err(DataError::Input("non-numeric coordinate".into())),
            }
        })
        .collect::<Result<Vec<Coord>>>()?;
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    Ok(ring)
}

fn parse_polygon(v: &Value) -> Result<Polygon> {
    let rings = v.as_array().ok_or_else(|| DataError::Input("polygon is not an array of rings".into()))?;
    let mut rings = rings.iter().map(parse_ring).collect::<Result<Vec<_>>>()?;
    if rings.is_empty() {
        return Err(DataError::Input("polygon without rings".into()));
    }
    let exterior = rings.remove(0);
    Ok(Polygon::new(exterior, rings))
}

fn prop_string(props: &Value, key: &str) -> Option<String> {
    match props.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Property names used when reading features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldNames {
    pub id: String,
    pub category: String,
    pub year: String,
}

impl Default for FieldNames {
    fn default() -> Self {
        Self {
            id: "id".into(),
            category: "category".into(),
            year: "year".into(),
        }
    }
}

/// Reads a GeoJSON `FeatureCollection` of `Polygon`/`MultiPolygon` features.
/// Multi-part features are split into one record per part, with ids
/// suffixed `#k`. Features with another geometry type are skipped. The
/// feature `id` member is used when the id property is absent, and the
/// feature index as a last resort.
pub fn parse_geojson(text: &str, fields: &FieldNames) -> Result<Vec<ParcelRecord>> {
    let doc: Value = serde_json::from_str(text)?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(DataError::Input("expected a GeoJSON FeatureCollection".into()));
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| DataError::Input("FeatureCollection without features".into()))?;
    let mut out = Vec::new();
    for (i, f) in features.iter().enumerate() {
        let props = f.get("properties").cloned().unwrap_or(Value::Null);
        let id = prop_string(&props, &fields.id)
            .or_else(|| match f.get("id") {
                Some(Value::String(s)) => Some(s.clone()),
                Some(Value::Number(n)) => Some(n.to_string()),
                _ => None,
            })
            .unwrap_or_else(|| i.to_string());
        let category = prop_string(&props, &fields.category).unwrap_or_default();
        let year = props.get(&fields.year).and_then(Value::as_i64).unwrap_or(0) as i32;
        let Some(geom) = f.get("geometry").filter(|g| !g.is_null()) else {
            log::warn!("feature {id}: no geometry, skipped");
            continue;
        };
        let coords = geom.get("coordinates").unwrap_or(&Value::Null);
        let polys = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => vec![parse_polygon(coords)?],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| DataError::Input(format!("feature {id}: bad MultiPolygon")))?
                .iter()
                .map(parse_polygon)
                .collect::<Result<Vec<_>>>()?,
            other => {
                log::warn!("feature {id}: geometry type {other:?} skipped");
                continue;
            }
        };
        let multi = polys.len() > 1;
        for (k, geometry) in polys.into_iter().enumerate() {
            out.push(ParcelRecord {
                id: if multi { format!("{id}#{k}") } else { id.clone() },
                category: category.clone(),
                year,
                geometry,
            });
        }
    }
    Ok(out)
}

pub fn read_geojson(path: impl AsRef<Path>, fields: &FieldNames) -> Result<Vec<ParcelRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::Input(format!("cannot read parcel file {}: {e}", path.display())))?;
    parse_geojson(&text, fields)
}

fn closed(ring: &[Coord]) -> Vec<[f64; 2]> {
    let mut r = ring.to_vec();
    if let Some(&first) = ring.first() {
        r.push(first);
    }
    r
}

/// Serializes parcels as a GeoJSON `FeatureCollection` with default
/// property names.
pub fn to_geojson(parcels: &[ParcelRecord]) -> Value {
    let features: Vec<Value> = parcels
        .iter()
        .map(|p| {
            let mut rings = vec![closed(&p.geometry.exterior)];
            rings.extend(p.geometry.holes.iter().map(|h| closed(h)));
            json!({
                "type": "Feature",
                "properties": {"id": p.id, "category": p.category, "year": p.year},
                "geometry": {"type": "Polygon", "coordinates": rings},
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

pub fn write_geojson(parcels: &[ParcelRecord], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string(&to_geojson(parcels))?)?;
    Ok(())
}

/// Why a parcel was removed by [`filter_parcels`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    ExcludedCategory,
    Malformed(String),
    DuplicateId,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FilterReport {
    pub kept: usize,
    pub rejected: Vec<(String, Rejection)>,
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Removes parcels in an excluded category (case-insensitive) and parcels
/// whose geometry cannot be repaired into a simple polygon with positive
/// area. Retained parcels carry the repaired geometry. Later duplicates of
/// an id are dropped.
pub fn filter_parcels(parcels: Vec<ParcelRecord>, exclusions: &[impl AsRef<str>]) -> (Vec<ParcelRecord>, FilterReport) {
    let excluded: HashSet<String> = exclusions.iter().map(|e| normalize(e.as_ref())).collect();
    let mut seen = HashSet::new();
    let mut report = FilterReport::default();
    let mut kept = Vec::with_capacity(parcels.len());
    for mut p in parcels {
        if excluded.contains(&normalize(&p.category)) {
            report.rejected.push((p.id, Rejection::ExcludedCategory));
            continue;
        }
        match p.geometry.repaired() {
            Ok(g) => p.geometry = g,
            Err(e) => {
                log::warn!("parcel {}: {e}", p.id);
                report.rejected.push((p.id, Rejection::Malformed(e.to_string())));
                continue;
            }
        }
        if !seen.insert(p.id.clone()) {
            report.rejected.push((p.id, Rejection::DuplicateId));
            continue;
        }
        kept.push(p);
    }
    report.kept = kept.len();
    (kept, report)
}
