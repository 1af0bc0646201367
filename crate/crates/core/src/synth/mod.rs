//! Synthetic videos with exact panoptic, flow and visibility annotations,
//! plus the toy backbone and heads that turn frames into predictions.

mod backbone;
mod disk;
mod scene;

pub use backbone::{
    head_targets, toy_backbone, HeadOutputs, HeadTargets, ToyBackbone, ToyHeads, OFFSET_SCALE,
};
pub use disk::{load_sequence, read_ppm, save_sequence, write_ppm, SequenceManifest};
pub use scene::{
    corrupt, generate_sequence, render_sequence, CorruptionSpec, SceneConfig, SceneObject,
    SyntheticSequence,
};
