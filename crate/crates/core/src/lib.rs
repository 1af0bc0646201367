//! Video panoptic segmentation at desk scale: a lightweight Transformer video
//! module with three attention factorizations, bottom-up panoptic
//! post-processing, flow-based instance tracking and (V)PQ evaluation on
//! synthetic sequences with exact ground truth.

pub mod error;
pub mod flow;
pub mod harness;
pub mod metrics;
pub mod panoptic;
pub mod synth;
pub mod tensor;
pub mod tracking;
pub mod transformer;

pub use error::{Error, Result};
pub use panoptic::{ClassPartition, PanopticMap, SemanticMap};
pub use tensor::{NDArray, Param, ParamStore, Rng, Tape};
pub use transformer::{AttentionVariant, VideoModule, VideoModuleConfig};
