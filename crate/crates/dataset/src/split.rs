//! Train/validation partitions keyed on tile metadata.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{DataError, Result};
use crate::sample::{SampleMeta, SampleRecord, YearQuarter};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitScheme {
    /// Validation is every tile of one province.
    ProvinceHoldout(String),
    /// Validation is every tile of one quarter.
    YearHoldout(YearQuarter),
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitScheme::ProvinceHoldout(p) => write!(f, "province_holdout:{p}"),
            SplitScheme::YearHoldout(q) => write!(f, "year_holdout:{q}"),
        }
    }
}

impl FromStr for SplitScheme {
    type Err = DataError;

    /// `province_holdout:RE` or `year_holdout:2024Q1`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("province_holdout", p)) if !p.is_empty() => Ok(SplitScheme::ProvinceHoldout(p.to_string())),
            Some(("year_holdout", q)) => Ok(SplitScheme::YearHoldout(q.parse()?)),
            _ => Err(DataError::Config(format!(
                "unknown split scheme {s:?} (expected province_holdout:<code> or year_holdout:<YYYYQn>)"
            ))),
        }
    }
}

impl Serialize for SplitScheme {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SplitScheme {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Metadata a split scheme looks at.
pub trait SplitKey {
    fn province(&self) -> &str;
    fn year_quarter(&self) -> YearQuarter;
}

impl SplitKey for SampleMeta {
    fn province(&self) -> &str {
        &self.province
    }

    fn year_quarter(&self) -> YearQuarter {
        self.year_quarter
    }
}

impl SplitKey for SampleRecord {
    fn province(&self) -> &str {
        &self.meta.province
    }

    fn year_quarter(&self) -> YearQuarter {
        self.meta.year_quarter
    }
}

impl SplitScheme {
    pub fn is_validation(&self, item: &impl SplitKey) -> bool {
        match self {
            SplitScheme::ProvinceHoldout(p) => item.province() == p,
            SplitScheme::YearHoldout(q) => item.year_quarter() == *q,
        }
    }
}

/// Indices of the training and validation items, each in input order.
pub fn split_indices<T: SplitKey>(items: &[T], scheme: &SplitScheme) -> Result<(Vec<usize>, Vec<usize>)> {
    let (val, train): (Vec<usize>, Vec<usize>) = (0..items.len()).partition(|&i| scheme.is_validation(&items[i]));
    if val.is_empty() {
        return Err(DataError::Input(format!("split {scheme} selects no validation tiles")));
    }
    Ok((train, val))
}

/// Partitions `items` into `(train, val)`.
pub fn split<T: SplitKey>(items: Vec<T>, scheme: &SplitScheme) -> Result<(Vec<T>, Vec<T>)> {
    split_indices(&items, scheme)?;
    Ok(items.into_iter().partition(|r| !scheme.is_validation(r)))
}
