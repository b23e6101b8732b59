//! Datasets, PNG conversion, checkpoints and run configuration.

mod checkpoint;
mod config;
mod dataset;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use config::{DataConfig, RunConfig};
pub use dataset::{
    image_to_png_bytes, load_image_dir, png_bytes_to_image, save_grid_png, save_png, synth_shapes, to_u8, Dataset,
    SHAPE_FAMILIES,
};
