//! Synth-to-real color alignment in LAB space and class-balanced sampling.

mod balance;
mod lab;

pub use balance::{class_balance_weights, weights_from_maps, SamplingWeights};
pub use lab::{
    align_split, align_to_target, dataset_lab_stats, lab_align_image, lab_align_raster, lab_to_rgb, rgb_to_lab,
    sample_entries, AlignmentRecord, LabAccumulator, LabRaster, LabStats, ALIGNMENT_RECORD,
};

/// Images sampled for dataset statistics unless told otherwise.
pub const DEFAULT_STATS_SAMPLE: usize = 500;
