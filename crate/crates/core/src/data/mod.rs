//! Video ingestion and clip generation.
//!
//! Videos are directories of PPM frames listed in a TSV manifest. Training
//! clips use random temporal positions, multi-scale corner/center crops and
//! horizontal flips; inference clips tile the video with non-overlapping
//! center-cropped windows.

pub mod augment;
pub mod frames;
pub mod manifest;
pub mod mean;
pub mod synthetic;

pub use augment::{
    clip_indices, hflip, inference_clips, mean_subtract, render_clip, sample_training_clip,
    window_starts, AugmentConfig, Clip, CropPosition, Provenance,
};
pub use frames::{frame_path, read_frame, write_frame, Frame};
pub use manifest::{load_manifest, Split, VideoRecord};
pub use mean::{compute_channel_mean, read_mean_file, write_mean_file};
