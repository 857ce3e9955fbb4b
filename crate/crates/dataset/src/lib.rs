//! Dataset construction and ingestion for parcel delineation.
//!
//! Builds square tiles from parcel polygons and georeferenced rasters,
//! reads external benchmark layouts, and handles splits and augmentation.

pub mod ai4b;
pub mod augment;
pub mod build;
pub mod composite;
pub mod eras;
pub mod error;
pub mod geometry;
pub mod geotiff;
pub mod parcels;
pub mod rasterize;
pub mod resize;
pub mod sample;
pub mod split;
pub mod synthetic;
pub mod tiling;

pub use error::{DataError, Result};
pub use sample::{SampleMeta, SampleRecord, Source, YearQuarter};
pub use split::SplitScheme;
