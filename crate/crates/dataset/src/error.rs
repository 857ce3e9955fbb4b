use thiserror::Error;

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Core(#[from] fieldsam_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("tiff {path}: {reason}")]
    Tiff { path: String, reason: String },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{skipped} of {total} samples unreadable (limit {limit_pct}%)")]
    TooManySkipped {
        skipped: usize,
        total: usize,
        limit_pct: f64,
    },

    #[error("tile {tile}: {source}")]
    Tile {
        tile: String,
        #[source]
        source: Box<DataError>,
    },
}

impl DataError {
    pub(crate) fn tiff(path: impl AsRef<std::path::Path>, reason: impl ToString) -> Self {
        DataError::Tiff {
            path: path.as_ref().display().to_string(),
            reason: reason.to_string(),
        }
    }

    /// Wraps an error with the tile it occurred in.
    pub fn in_tile(self, tile: impl Into<String>) -> Self {
        DataError::Tile {
            tile: tile.into(),
            source: Box::new(self),
        }
    }
}
