//! Bottom-up panoptic post-processing.

mod postprocess;
mod types;

pub use postprocess::{
    find_centers, group_instances, merge_panoptic, postprocess, Center, CenterParams,
};
pub use types::{ClassPartition, PanopticMap, SemanticMap, LABEL_DIVISOR};
