//! Volumes, label algebra, morphology, metrics and statistics for
//! brain-tumor segmentation studies.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod extraction;
pub mod labels;
pub mod metrics;
pub mod morphology;
pub mod nifti;
pub mod phantom;
pub mod stats;
pub mod volume;

pub use labels::{Schema, Segment, SegmentMaskSet};
pub use volume::{Grid, LabelVolume, Mask, Modality, MultiModalRecord, Shape3, Volume};
