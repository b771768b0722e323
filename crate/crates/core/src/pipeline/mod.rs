//! Dataset and model plumbing: DOTA text formats, patch tiling and merging,
//! seeded splits, model configs and parameter/FLOP accounting.

pub mod config;
pub mod count;
pub mod dota;
pub mod patch;
pub mod split;

pub use config::{LayerSpec, ModelConfig};
pub use count::{count_params_flops, CountReport, LayerCount};
pub use dota::{
    load_ground_truth_dir, parse_detections, parse_dota_annotation, records_to_ground_truth,
    serialize_detections, serialize_dota_annotation, AnnotationRecord,
};
pub use patch::{
    axis_starts, clip_annotations_to_window, merge_patch_detections, parse_window_index,
    patch_grid, patch_id, window_index_to_text, ClipConfig, ClippedRecord, PatchSpec, Window,
    WindowIndex,
};
pub use split::{ratio_split, split_sizes, SplitManifest};
