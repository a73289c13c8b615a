//! Synthetic moving-shape videos whose centre frame is blurred or occluded.

mod dataset;
mod degrade;
mod generate;

pub use dataset::{decode_tensor, encode_tensor, read_dataset, write_dataset, MANIFEST_FILE};
pub use degrade::{apply_degradation, Degradation, Frame, PixelRect, OCCLUSION_COVERAGE};
pub use generate::{generate_clip, generate_dataset, mask_bbox, Clip, ClipConfig, GtBox, Shape};
