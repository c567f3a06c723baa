//! Images: the raster type, PGM ingestion, synthetic characters and augmentation.

mod augment;
mod image;
mod loader;
pub mod pgm;
mod synth;

pub use augment::{augment, AugmentParams, AugmentRanges};
pub use image::GrayImage;
pub use loader::{load_image_dir, split_of, write_manifest, DatasetSplit, LoadedImage, Split};
pub use synth::{synth_dataset, synth_strokes, SynthOptions};
