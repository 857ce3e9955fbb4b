//! Tile samples and their metadata.

use std::fmt;
use std::str::FromStr;

use candle_core::Device;
use fieldsam_core::automask::GeoRef;
use fieldsam_core::training::TrainSample;
use fieldsam_core::{Image, InstanceMask, Normalization};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{DataError, Result};

/// Province codes of the Emilia-Romagna region.
pub const ER_PROVINCES: [&str; 9] = ["BO", "MO", "RE", "FE", "RN", "PC", "RA", "PR", "FC"];

/// Imagery source of a tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    /// 10 m Sentinel-2 RGB.
    S2,
    /// High-resolution commercial imagery.
    HR,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::S2 => "S2",
            Source::HR => "HR",
        })
    }
}

impl FromStr for Source {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S2" => Ok(Source::S2),
            "HR" => Ok(Source::HR),
            _ => Err(DataError::Input(format!("unknown source {s:?}"))),
        }
    }
}

/// Calendar quarter, written `2024Q1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct YearQuarter {
    pub year: i32,
    pub quarter: u8,
}

impl YearQuarter {
    pub fn new(year: i32, quarter: u8) -> Result<Self> {
        if !(1..=4).contains(&quarter) {
            return Err(DataError::Input(format!("quarter must be 1..=4, got {quarter}")));
        }
        Ok(Self { year, quarter })
    }

    pub fn from_month(year: i32, month: u8) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(DataError::Input(format!("month must be 1..=12, got {month}")));
        }
        Self::new(year, (month - 1) / 3 + 1)
    }
}

impl fmt::Display for YearQuarter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Q{}", self.year, self.quarter)
    }
}

impl FromStr for YearQuarter {
    type Err = DataError;

    /// Accepts `2024Q1`, `2024-Q1` and `2024q1`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || DataError::Input(format!("expected a year-quarter like 2024Q1, got {s:?}"));
        let upper = s.trim().to_ascii_uppercase();
        let (y, q) = upper.split_once('Q').ok_or_else(bad)?;
        let year = y.trim_end_matches('-').parse().map_err(|_| bad())?;
        let quarter = q.parse().map_err(|_| bad())?;
        Self::new(year, quarter)
    }
}

impl Serialize for YearQuarter {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearQuarter {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub province: String,
    pub year_quarter: YearQuarter,
    pub source: Source,
    pub georef: Option<GeoRef>,
}

/// One tile: RGB raster plus instance map of the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub meta: SampleMeta,
    pub image: Image,
    pub mask: InstanceMask,
}

impl SampleRecord {
    /// Checks the shapes and relabels the instances densely from 1.
    pub fn new(meta: SampleMeta, image: Image, mask: InstanceMask) -> Result<Self> {
        if (image.width(), image.height()) != (mask.width(), mask.height()) {
            return Err(DataError::Input(format!(
                "{}: image {}x{} vs mask {}x{}",
                meta.id,
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        if image.channels() != 3 {
            return Err(DataError::Input(format!("{}: expected 3 bands, got {}", meta.id, image.channels())));
        }
        let mask = if mask.is_dense() { mask } else { mask.relabel_dense() };
        Ok(Self { meta, image, mask })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.width(), self.image.height())
    }

    pub fn n_instances(&self) -> usize {
        self.mask.instance_ids().len()
    }

    /// Normalized channel-first tensor plus one binary mask per instance.
    pub fn to_train_sample(&self, norm: &Normalization, device: &Device) -> Result<TrainSample> {
        let image = norm.apply(&self.image)?.to_tensor(device)?;
        let instances = self.mask.instances().into_iter().map(|(_, m)| m).collect();
        Ok(TrainSample { image, instances })
    }
}

impl From<candle_core::Error> for DataError {
    fn from(e: candle_core::Error) -> Self {
        DataError::Core(e.into())
    }
}
