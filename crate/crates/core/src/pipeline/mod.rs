//! Tiling, run configuration, manifests and the command implementations.

mod commands;
mod config;
mod manifest;
mod tiling;

pub use commands::{
    cmd_evaluate, cmd_normalize, cmd_select_template, cmd_tile, cmd_train, list_images, EvalSummary, Normalizer,
    TemplateChoice, TrainSummary, IMAGE_EXTENSIONS, MANIFEST_NAME, MEAN_HISTOGRAM_NAME, WINNER_HISTOGRAM_NAME,
};
pub use config::{Method, RunConfig, TemplateSource, TrainSettings, SEED_ENV};
pub use manifest::{FileRecord, FileStatus, RunManifest, Timings};
pub use tiling::{tile_image, tile_origins, EdgePolicy, Tile, TileSpec};
