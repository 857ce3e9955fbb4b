//! Per-pixel compositing of repeated acquisitions into one mosaic.

use fieldsam_core::{BinaryMask, Image};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};

/// How the "first quartile" of the valid values is selected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuartileRule {
    /// The lowest `ceil(n / 4)` values.
    #[default]
    CeilQuarter,
    /// The lowest `max(1, floor(n / 4))` values.
    FloorQuarter,
    /// Every value at or below the linearly interpolated 25th percentile.
    Percentile25,
}

impl std::str::FromStr for QuartileRule {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ceil_quarter" => Ok(Self::CeilQuarter),
            "floor_quarter" => Ok(Self::FloorQuarter),
            "percentile25" => Ok(Self::Percentile25),
            _ => Err(DataError::Config(format!("unknown quartile rule {s:?}"))),
        }
    }
}

/// Mean of the first quartile of `sorted` (ascending, non-empty).
fn quartile_mean_sorted(sorted: &[f64], rule: QuartileRule) -> f64 {
    let n = sorted.len();
    let take = match rule {
        QuartileRule::CeilQuarter => n.div_ceil(4).max(1),
        QuartileRule::FloorQuarter => (n / 4).max(1),
        QuartileRule::Percentile25 => {
            let pos = 0.25 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let q = sorted[lo] + (pos - lo as f64) * (sorted[(lo + 1).min(n - 1)] - sorted[lo]);
            sorted.iter().take_while(|v| **v <= q).count().max(1)
        }
    };
    sorted[..take].iter().sum::<f64>() / take as f64
}

/// Aggregates one band of one pixel. Observations flagged invalid, or
/// holding a non-finite value, are discarded. `None` when nothing valid
/// remains.
pub fn aggregate_quartile_mean(observations: &[(f32, bool)], rule: QuartileRule) -> Option<f32> {
    let mut v: Vec<f64> = observations
        .iter()
        .filter(|(x, ok)| *ok && x.is_finite())
        .map(|(x, _)| *x as f64)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(quartile_mean_sorted(&v, rule) as f32)
}

/// One acquisition: interleaved `(height, width, bands)` values plus a
/// per-pixel validity flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Acquisition {
    pub image: Image,
    pub valid: BinaryMask,
}

impl Acquisition {
    /// Marks pixels invalid where any band equals `nodata` or is non-finite.
    pub fn from_image(image: Image, nodata: Option<f32>) -> Self {
        let valid = BinaryMask::from_fn(image.width(), image.height(), |x, y| {
            image.pixel(x, y).iter().all(|v| v.is_finite() && Some(*v) != nodata)
        });
        Self { image, valid }
    }
}

/// All acquisitions of one area over a compositing period.
#[derive(Clone, Debug, Default)]
pub struct ObservationStack {
    acquisitions: Vec<Acquisition>,
}

/// Composite raster and the pixels that had no valid observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub image: Image,
    pub nodata: BinaryMask,
}

impl ObservationStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.acquisitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acquisitions.is_empty()
    }

    pub fn push(&mut self, acq: Acquisition) -> Result<()> {
        if acq.valid.shape() != (acq.image.width(), acq.image.height()) {
            return Err(DataError::Input("validity mask does not match its image".into()));
        }
        if let Some(first) = self.acquisitions.first() {
            let a = &first.image;
            let b = &acq.image;
            if (a.width(), a.height(), a.channels()) != (b.width(), b.height(), b.channels()) {
                return Err(DataError::Input(format!(
                    "acquisition {}x{}x{} does not match stack {}x{}x{}",
                    b.width(),
                    b.height(),
                    b.channels(),
                    a.width(),
                    a.height(),
                    a.channels()
                )));
            }
        }
        self.acquisitions.push(acq);
        Ok(())
    }

    /// Band-wise quartile mean per pixel. Pixels without any valid
    /// observation are set to `fill` and flagged in `nodata`.
    pub fn composite(&self, rule: QuartileRule, fill: f32) -> Result<Composite> {
        let first = self
            .acquisitions
            .first()
            .ok_or_else(|| DataError::Input("empty observation stack".into()))?;
        let (w, h, c) = (first.image.width(), first.image.height(), first.image.channels());
        let mut image = Image::zeros(w, h, c);
        let mut nodata = BinaryMask::new(w, h);
        let mut obs = Vec::with_capacity(self.acquisitions.len());
        for y in 0..h {
            for x in 0..w {
                for band in 0..c {
                    obs.clear();
                    obs.extend(self.acquisitions.iter().map(|a| (a.image.get(x, y, band), a.valid.get(x, y))));
                    match aggregate_quartile_mean(&obs, rule) {
                        Some(v) => image.set(x, y, band, v),
                        None => {
                            image.set(x, y, band, fill);
                            nodata.set(x, y, true);
                        }
                    }
                }
            }
        }
        Ok(Composite { image, nodata })
    }
}
