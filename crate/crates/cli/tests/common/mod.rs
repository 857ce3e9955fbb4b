#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fieldsam_data::eras::ErasWriter;
use fieldsam_data::geometry::{Bbox, Polygon};
use fieldsam_data::parcels::{write_geojson, ParcelRecord};
use fieldsam_data::synthetic::{rect_dataset, write_parcel_raster};

pub fn fieldsam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fieldsam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// `n` rectangle tiles of `size` pixels written as a tile dataset.
pub fn synthetic_dataset(root: &Path, n: usize, size: usize, seed: u64) -> PathBuf {
    let out = root.join("eras");
    let mut w = ErasWriter::create(&out).unwrap();
    for r in rect_dataset(n, size, seed).unwrap() {
        w.write(&r).unwrap();
    }
    w.finish(serde_json::json!({"synthetic": true})).unwrap();
    out
}

/// Run config for a short tiny-preset job on `dataset`.
pub fn run_config(dir: &Path, dataset: &Path, output: &str, train: &str) -> PathBuf {
    let text = format!(
        r#"
output = "{output}"
seed = 5

[model]
preset = "tiny"

[data]
dataset = "{}"
split = "year_holdout:2023Q3"

[train]
peak_lr = 3e-3
warmup_steps = 5
batch_size = 2
lora_rank = 4
{train}

[automask]
grid_n = 8
"#,
        path_str(dataset)
    );
    let path = dir.join(format!("{output}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

/// Two kept parcels and one excluded hedge, with two rasters covering them.
/// Returns the build config path; the dataset goes to `<dir>/out`.
pub fn two_parcel_build(dir: &Path) -> PathBuf {
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
    let text = r#"
output = "out"
year_quarter = "2024Q1"
epsg = 32632
seed = 3

[[provinces]]
code = "RE"
parcels = "parcels.geojson"
rasters = ["a.tif", "b.tif"]
"#;
    let path = dir.join("build.toml");
    std::fs::write(&path, text).unwrap();
    path
}
