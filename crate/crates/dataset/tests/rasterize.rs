use fieldsam_data::geometry::Polygon;
use fieldsam_data::parcels::ParcelRecord;
use fieldsam_data::rasterize::{pixel_center, rasterize, tile_georef, tile_pixels};
use fieldsam_data::tiling::TilePlan;
use proptest::prelude::*;

fn tile() -> TilePlan {
    TilePlan { id: "BO-0000".into(), province: "BO".into(), centroid: [10_000.0, 20_000.0], side_m: 2560.0 }
}

fn parcel(id: &str, poly: Polygon) -> ParcelRecord {
    ParcelRecord { id: id.into(), category: "arable".into(), year: 2024, geometry: poly }
}

#[test]
fn resolutions_give_model_sizes() {
    assert_eq!(tile_pixels(2560.0, 10.0).unwrap(), 256);
    assert_eq!(tile_pixels(2560.0, 2.5).unwrap(), 1024);
    assert!(tile_pixels(2560.0, 3.0).is_err());
    assert!(tile_pixels(2560.0, 0.0).is_err());
}

#[test]
fn georef_places_tile_corner() {
    let g = tile_georef(&tile(), 10.0, Some(32632));
    assert_eq!((g.origin_x, g.origin_y), (8720.0, 21_280.0));
    assert_eq!(pixel_center(&g, 0, 0), [8725.0, 21_275.0]);
    assert_eq!(g.epsg, Some(32632));
}

#[test]
fn square_of_500_m_burns_2500_pixels() {
    // Offset by a fraction of a pixel so the edges cut through pixel centres.
    let p = parcel("a", Polygon::rect(9_003.0, 19_507.0, 9_503.0, 20_007.0));
    let r = rasterize(&tile(), &[p], 10.0, None).unwrap();
    let count = r.mask.instance(1).count() as f64;
    assert!((count - 2500.0).abs() <= 0.02 * 2500.0, "{count}");
    assert_eq!(r.parcel_ids, vec!["a".to_string()]);
}

#[test]
fn no_intersecting_parcel_gives_empty_mask() {
    let far = parcel("far", Polygon::rect(0.0, 0.0, 100.0, 100.0));
    let r = rasterize(&tile(), &[far], 10.0, None).unwrap();
    assert!(r.mask.as_slice().iter().all(|v| *v == 0));
    assert!(r.parcel_ids.is_empty());
    let r = rasterize(&tile(), &[], 10.0, None).unwrap();
    assert!(r.mask.instance_ids().is_empty());
}

#[test]
fn overlap_goes_to_the_larger_parcel() {
    let small = parcel("small", Polygon::rect(9_000.0, 19_000.0, 9_300.0, 19_300.0));
    let big = parcel("big", Polygon::rect(9_100.0, 19_100.0, 9_700.0, 19_700.0));
    for order in [[small.clone(), big.clone()], [big.clone(), small.clone()]] {
        let r = rasterize(&tile(), &order, 10.0, None).unwrap();
        let big_id = r.parcel_ids.iter().position(|s| s == "big").unwrap() as u32 + 1;
        let g = r.georef.clone();
        let col = ((9_200.0 - g.origin_x) / 10.0) as usize;
        let row = ((g.origin_y - 19_200.0) / 10.0) as usize;
        assert_eq!(r.mask.get(col, row), big_id);
        assert_eq!(r.mask.instance(big_id).count(), 3600);
        assert_eq!(r.mask.instance_ids().len(), 2);
    }
}

#[test]
fn equal_areas_tie_to_smaller_id() {
    let a = parcel("a", Polygon::rect(9_000.0, 19_000.0, 9_200.0, 19_200.0));
    let b = parcel("b", Polygon::rect(9_100.0, 19_100.0, 9_300.0, 19_300.0));
    let r = rasterize(&tile(), &[b, a], 10.0, None).unwrap();
    assert_eq!(r.parcel_ids, vec!["a".to_string(), "b".to_string()]);
    assert_eq!(r.mask.instance(1).count(), 400);
    assert_eq!(r.mask.instance(2).count(), 300);
}

#[test]
fn parcels_clip_to_tile() {
    let p = parcel("edge", Polygon::rect(8_000.0, 19_000.0, 9_000.0, 19_500.0));
    let r = rasterize(&tile(), &[p], 10.0, None).unwrap();
    assert_eq!(r.mask.instance(1).count(), 28 * 50);
}

/// Regular n-gon inscribed in a circle, a convex polygon.
fn ngon(cx: f64, cy: f64, radius: f64, n: usize, phase: f64) -> Polygon {
    let ring = (0..n)
        .map(|i| {
            let t = phase + i as f64 * std::f64::consts::TAU / n as f64;
            [cx + radius * t.cos(), cy + radius * t.sin()]
        })
        .collect();
    Polygon::new(ring, vec![])
}

fn perimeter(p: &Polygon) -> f64 {
    let r = &p.exterior;
    (0..r.len())
        .map(|i| {
            let (a, b) = (r[i], r[(i + 1) % r.len()]);
            (a[0] - b[0]).hypot(a[1] - b[1])
        })
        .sum()
}

/// Lattice-point bound for a convex region of area `a` and perimeter `p`
/// (both in pixel units): `a - p/2 < n <= a + p/2 + 1`.
fn lattice_bound_holds(n: f64, a: f64, p: f64) -> bool {
    n > a - p / 2.0 - 1e-9 && n <= a + p / 2.0 + 1.0 + 1e-9
}

proptest! {
    #[test]
    fn convex_pixel_count_obeys_lattice_bound(
        dx in -600.0f64..600.0,
        dy in -600.0f64..600.0,
        radius in 60.0f64..500.0,
        sides in 3usize..12,
        phase in 0.0f64..6.3,
    ) {
        let poly = ngon(10_000.0 + dx, 20_000.0 + dy, radius, sides, phase);
        let (a, p) = (poly.area() / 100.0, perimeter(&poly) / 10.0);
        prop_assume!(a >= 100.0);
        let r = rasterize(&tile(), &[parcel("p", poly)], 10.0, None).unwrap();
        let n = r.mask.instance(1).count() as f64;
        prop_assert!(lattice_bound_holds(n, a, p), "{n} vs area {a}, perimeter {p}");
    }

    #[test]
    fn convex_pixel_count_within_two_percent_when_bound_allows(
        dx in -100.0f64..100.0,
        dy in -100.0f64..100.0,
        radius in 600.0f64..1200.0,
        sides in 3usize..12,
        phase in 0.0f64..6.3,
    ) {
        let poly = ngon(10_000.0 + dx, 20_000.0 + dy, radius, sides, phase);
        let (a, p) = (poly.area() / 100.0, perimeter(&poly) / 10.0);
        prop_assume!(p / 2.0 + 1.0 <= 0.02 * a);
        let r = rasterize(&tile(), &[parcel("p", poly)], 10.0, None).unwrap();
        let n = r.mask.instance(1).count() as f64;
        prop_assert!((n - a).abs() <= 0.02 * a, "{n} vs {a}");
    }

    #[test]
    fn rect_pixel_count_obeys_lattice_bound(
        x0 in 8_800.0f64..10_000.0,
        y0 in 18_800.0f64..20_000.0,
        w in 100.0f64..1000.0,
        h in 100.0f64..1000.0,
    ) {
        let r = rasterize(&tile(), &[parcel("p", Polygon::rect(x0, y0, x0 + w, y0 + h))], 10.0, None).unwrap();
        let n = r.mask.instance(1).count() as f64;
        let (a, p) = (w * h / 100.0, (w + h) / 5.0);
        prop_assert!(lattice_bound_holds(n, a, p), "{n} vs area {a}, perimeter {p}");
    }
}
