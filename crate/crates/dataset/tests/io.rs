use std::path::Path;

use fieldsam_core::automask::GeoRef;
use fieldsam_core::{Image, InstanceMask};
use fieldsam_data::ai4b::{self, read_ai4b, Ai4bConfig};
use fieldsam_data::build::{build_dataset, BuildConfig, ProvinceInput};
use fieldsam_data::eras::{ErasDataset, ErasWriter};
use fieldsam_data::geometry::{Bbox, Polygon};
use fieldsam_data::geotiff;
use fieldsam_data::parcels::{write_geojson, ParcelRecord};
use fieldsam_data::synthetic::{rect_dataset, write_parcel_raster};
use fieldsam_data::{DataError, YearQuarter};

fn georef() -> GeoRef {
    GeoRef { origin_x: 600_000.0, origin_y: 4_950_000.0, pixel_size: 10.0, epsg: Some(32632) }
}

#[test]
fn geotiff_image_and_mask_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let image = Image::new(3, 2, 3, (0..18).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap();
    let mask = InstanceMask::from_vec(3, 2, vec![0, 1, 70_000, 2, 2, 0]).unwrap();
    geotiff::write_image(dir.path().join("i.tif"), &image, Some(&georef())).unwrap();
    geotiff::write_mask(dir.path().join("m.tif"), &mask, Some(&georef())).unwrap();
    let (i2, g) = geotiff::read_image(dir.path().join("i.tif")).unwrap();
    assert_eq!(i2, image);
    assert_eq!(g, Some(georef()));
    let (m2, g) = geotiff::read_mask(dir.path().join("m.tif"), 0).unwrap();
    assert_eq!(m2, mask);
    assert_eq!(g, Some(georef()));
}

#[test]
fn geotiff_without_georef_and_bad_band() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("plain.tif");
    geotiff::write_image(&p, &Image::zeros(2, 2, 3), None).unwrap();
    let r = geotiff::read_raster(&p).unwrap();
    assert_eq!((r.width, r.height, r.bands, r.georef.clone()), (2, 2, 3, None));
    assert!(r.select_bands(&[3]).is_err());
    assert!(r.to_instance_mask(0).is_ok());
    let frac = geotiff::Raster { data: vec![0.5; 4], bands: 1, ..r };
    assert!(frac.to_instance_mask(0).is_err());
}

#[test]
fn geotiff_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.tif");
    std::fs::write(&p, b"not a tiff").unwrap();
    let e = geotiff::read_raster(&p).unwrap_err();
    assert!(matches!(e, DataError::Tiff { .. }));
    assert!(e.to_string().contains("junk.tif"));
    assert!(geotiff::read_raster(dir.path().join("missing.tif")).is_err());
}

fn write_ai4b(root: &Path, n: usize) {
    let cfg = Ai4bConfig::default();
    for (i, r) in rect_dataset(n, 32, 5).unwrap().iter().enumerate() {
        let country = if i % 2 == 0 { "AT" } else { "NL" };
        ai4b::write_tile(root, country, &format!("{country}_{i:04}"), &cfg, r).unwrap();
    }
}

#[test]
fn ai4b_reads_every_tile() {
    let dir = tempfile::tempdir().unwrap();
    write_ai4b(dir.path(), 6);
    let reader = read_ai4b(dir.path(), &Ai4bConfig::default()).unwrap();
    assert_eq!(reader.len(), 6);
    let records: Vec<_> = reader.collect::<Result<_, _>>().unwrap();
    assert_eq!(records.len(), 6);
    let originals = rect_dataset(6, 32, 5).unwrap();
    let first = records.iter().find(|r| r.meta.id == "AT_0000").unwrap();
    assert_eq!(first.mask, originals[0].mask);
    assert_eq!(first.image, originals[0].image);
    assert_eq!(first.meta.province, "AT");
    assert_eq!(first.meta.year_quarter, YearQuarter::new(2019, 2).unwrap());
}

#[test]
fn ai4b_label_stack_bands() {
    let mask = InstanceMask::from_vec(4, 1, vec![0, 1, 1, 1]).unwrap();
    let s = ai4b::label_stack(&mask);
    let band = |b: usize| s.iter().skip(b).step_by(4).copied().collect::<Vec<f32>>();
    assert_eq!(band(0), [0., 1., 1., 1.]);
    assert_eq!(band(1), [0., 1., 0., 0.]);
    assert_eq!(band(2), [0., 0., 1., 2.]);
    assert_eq!(band(3), [0., 1., 1., 1.]);
}

#[test]
fn ai4b_empty_root_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(read_ai4b(dir.path(), &Ai4bConfig::default()).is_err());
    std::fs::create_dir_all(dir.path().join("sentinel2/masks/AT")).unwrap();
    assert!(read_ai4b(dir.path(), &Ai4bConfig::default()).is_err());
}

#[test]
fn ai4b_skips_one_corrupt_tile_among_many() {
    let dir = tempfile::tempdir().unwrap();
    write_ai4b(dir.path(), 24);
    let img = dir.path().join("sentinel2/images/AT/AT_0004_S2_10m_256_2019-05.tif");
    std::fs::write(&img, b"corrupt").unwrap();
    let mut reader = read_ai4b(dir.path(), &Ai4bConfig::default()).unwrap();
    let records: Vec<_> = reader.by_ref().collect::<Result<_, _>>().unwrap();
    assert_eq!(records.len(), 23);
    assert_eq!(reader.skipped(), 1);
}

#[test]
fn ai4b_fails_beyond_five_percent() {
    let dir = tempfile::tempdir().unwrap();
    write_ai4b(dir.path(), 10);
    std::fs::remove_file(dir.path().join("sentinel2/images/NL/NL_0003_S2_10m_256_2019-05.tif")).unwrap();
    let results: Vec<_> = read_ai4b(dir.path(), &Ai4bConfig::default()).unwrap().collect();
    assert!(matches!(results.last(), Some(Err(DataError::TooManySkipped { skipped: 1, total: 10, .. }))));
}

#[test]
fn ai4b_month_outside_season_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_ai4b(dir.path(), 2);
    let cfg = Ai4bConfig { month: 11, ..Default::default() };
    assert!(read_ai4b(dir.path(), &cfg).is_err());
}

#[test]
fn eras_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ds");
    let records = rect_dataset(5, 32, 11).unwrap();
    let mut w = ErasWriter::create(&root).unwrap();
    for r in &records {
        w.write(r).unwrap();
    }
    assert!(w.write(&records[0]).is_err());
    let manifest = w.finish(serde_json::json!({"note": "test"})).unwrap();
    assert_eq!(manifest.n_tiles, 5);
    assert_eq!(manifest.n_instances, 20);
    let ds = ErasDataset::open(&root).unwrap();
    assert_eq!(ds.manifest(), &manifest);
    assert_eq!(ds.load_all().unwrap(), records);
    let row = &ds.rows()[1];
    assert_eq!(row.max_x.unwrap() - row.min_x.unwrap(), 320.0);
    assert_eq!(row.epsg, Some(32632));
    assert!(ErasWriter::create(&root).is_err());
}

#[test]
fn eras_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = ErasWriter::create(dir.path()).unwrap();
    let records = rect_dataset(2, 16, 1).unwrap();
    for r in &records {
        w.write(r).unwrap();
    }
    w.finish(serde_json::Value::Null).unwrap();
    geotiff::write_mask(dir.path().join("masks/SYN-0001.tif"), &InstanceMask::new(16, 16), None).unwrap();
    let ds = ErasDataset::open(dir.path()).unwrap();
    assert!(ds.load(0).is_ok());
    let e = ds.load(1).unwrap_err();
    assert!(e.to_string().contains("SYN-0001"), "{e}");
    std::fs::write(dir.path().join("index.csv"), "id\n").unwrap();
    assert!(ErasDataset::open(dir.path()).is_err());
}

fn two_parcel_fixture(dir: &Path) -> BuildConfig {
    let parcels = vec![
        ParcelRecord {
            id: "p1".into(),
            category: "wheat".into(),
            year: 2024,
            geometry: Polygon::rect(700_000.0, 4_900_000.0, 701_200.0, 4_900_800.0),
        },
        ParcelRecord {
            id: "p2".into(),
            category: "maize".into(),
            year: 2024,
            geometry: Polygon::rect(701_300.0, 4_900_100.0, 702_000.0, 4_901_000.0),
        },
        ParcelRecord {
            id: "hedge".into(),
            category: "landscape element".into(),
            year: 2024,
            geometry: Polygon::rect(700_000.0, 4_901_000.0, 700_050.0, 4_901_500.0),
        },
    ];
    write_geojson(&parcels, dir.join("parcels.geojson")).unwrap();
    let extent = Bbox::new(697_000.0, 4_897_000.0, 705_000.0, 4_904_000.0);
    write_parcel_raster(dir.join("a.tif"), &parcels[..2], &extent, 10.0, Some(32632)).unwrap();
    write_parcel_raster(dir.join("b.tif"), &parcels[..2], &extent, 10.0, Some(32632)).unwrap();
    BuildConfig {
        output: dir.join("out"),
        year_quarter: YearQuarter::new(2024, 1).unwrap(),
        source: fieldsam_data::Source::S2,
        resolution_m: 10.0,
        epsg: Some(32632),
        exclusions: vec!["landscape element".into()],
        fields: Default::default(),
        plan: Default::default(),
        quartile_rule: Default::default(),
        nodata: None,
        rgb_bands: [0, 1, 2],
        seed: 3,
        provinces: vec![ProvinceInput {
            code: "RE".into(),
            parcels: dir.join("parcels.geojson"),
            rasters: vec![dir.join("a.tif"), dir.join("b.tif")],
        }],
    }
}

#[test]
fn build_two_parcel_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = two_parcel_fixture(dir.path());
    let summary = build_dataset(&cfg).unwrap();
    let re = &summary.provinces["RE"];
    assert_eq!((re.parcels_read, re.parcels_kept), (3, 2));
    // 1.59 km² of parcels: K = ceil(1.1 · 1.59 / 6.5536) = 1.
    assert!((1..=2).contains(&re.tiles));
    assert_eq!(re.tiles, 1);
    let ds = ErasDataset::open(&cfg.output).unwrap();
    let tile = ds.load(0).unwrap();
    assert_eq!(tile.size(), (256, 256));
    assert_eq!(tile.n_instances(), 2);
    assert_eq!(tile.meta.province, "RE");
    let g = tile.meta.georef.clone().unwrap();
    assert_eq!(g.pixel_size, 10.0);
    // Pixel colours follow the parcel painted underneath.
    let col = ((700_500.0 - g.origin_x) / 10.0) as usize;
    let row = ((g.origin_y - 4_900_500.0) / 10.0) as usize;
    let expected = fieldsam_data::synthetic::parcel_colour(&[], 0.0, 0.0);
    assert_ne!(tile.image.pixel(col, row), &expected);
    assert_eq!(re.nodata_pixels, 0);
}

#[test]
fn build_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = two_parcel_fixture(dir.path());
    let a = build_dataset(&cfg).unwrap();
    let cfg_b = BuildConfig { output: dir.path().join("out2"), ..cfg };
    let b = build_dataset(&cfg_b).unwrap();
    assert_eq!(a.manifest.index_sha256, b.manifest.index_sha256);
}

#[test]
fn build_missing_parcel_file_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = two_parcel_fixture(dir.path());
    cfg.provinces[0].parcels = dir.path().join("nope.geojson");
    assert!(matches!(build_dataset(&cfg), Err(DataError::Config(_))));
    assert!(!cfg.output.exists());
}

#[test]
fn build_errors_carry_tile_context() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = two_parcel_fixture(dir.path());
    cfg.epsg = Some(4326);
    let e = build_dataset(&cfg).unwrap_err();
    assert!(matches!(e, DataError::Tile { .. }));
    assert!(e.to_string().contains("RE-0000"), "{e}");
}

#[test]
fn build_config_from_toml_with_defaults() {
    let text = r#"
        output = "out"
        year_quarter = "2024Q1"
        [[provinces]]
        code = "BO"
        parcels = "bo.geojson"
        rasters = ["bo.tif"]
    "#;
    let mut cfg: BuildConfig = toml::from_str(text).unwrap();
    assert_eq!(cfg.resolution_m, 10.0);
    assert_eq!(cfg.plan.coverage_factor, 1.10);
    assert_eq!(cfg.exclusions.len(), 2);
    cfg.resolve_paths(Path::new("/data"));
    assert_eq!(cfg.provinces[0].parcels, Path::new("/data/bo.geojson"));
    assert!(toml::from_str::<BuildConfig>(&format!("{text}\nbogus = 1")).is_err());
}
