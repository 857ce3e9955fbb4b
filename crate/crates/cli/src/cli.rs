use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fieldsam_core::{DecoderMode, Preset};
use fieldsam_data::SplitScheme;

use crate::commands::eval::Subset;
use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "fieldsam", version, about = "Parcel delineation with a LoRA-adapted promptable segmenter")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a tile dataset from parcel files and rasters.
    BuildDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Replaces `output` in the build config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fine-tune adapters on a tile dataset.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Validate, build the model and write the manifest without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score automatic prediction on a dataset split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Adapter or full model checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the base model without adapters.
        #[arg(long)]
        zero_shot: bool,
        #[arg(long, value_enum, default_value_t = Subset::Val)]
        subset: Subset,
    },
    /// Write per-tile prediction files for a GeoTIFF tile or directory.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Tile or directory of tiles.
        #[arg(long)]
        input: PathBuf,
        /// Raster bands used as R, G, B.
        #[arg(long, num_args = 3, value_delimiter = ',', default_values_t = [0usize, 1, 2])]
        rgb_bands: Vec<usize>,
    },
    /// Print trainable-parameter counts per component.
    CountParams {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        decoder: Option<DecoderMode>,
        #[arg(long)]
        rank: Option<usize>,
        /// Leave the image encoder without adapters.
        #[arg(long)]
        no_encoder_lora: bool,
        /// Print the five reference settings instead of one.
        #[arg(long)]
        table: bool,
        #[arg(long)]
        json: bool,
    },
}

/// Config file plus the flags that override its keys.
#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub preset: Option<Preset>,
    /// `province_holdout:<code>` or `year_holdout:<YYYYQn>`.
    #[arg(long)]
    pub split: Option<SplitScheme>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub grid_n: Option<usize>,
    #[arg(long)]
    pub conf_thresh: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

impl RunArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            preset: self.preset,
            split: self.split.clone(),
            dataset: self.dataset.clone(),
            output: self.output.clone(),
            grid_n: self.grid_n,
            conf_thresh: self.conf_thresh,
            nms_iou: self.nms_iou,
        }
    }
}
