//! Orchestration: streaming inference, evaluation output, attention timing,
//! gradient checks, toy training and overlays.

mod bench;
mod config;
mod gradcheck;
mod output;
mod pipeline;
mod render;
mod train;

pub use bench::{bench_attention, bench_csv, median, BenchConfig, BenchRow};
pub use config::{FlowSource, PipelineConfig, PredictionSource};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, ParamCheck};
pub use output::{evaluate, write_json, write_run};
pub use pipeline::{
    run_pipeline, run_with, timing_csv, FrameInput, FrameOutput, FrameTiming, Pipeline,
    PipelineOutput,
};
pub use render::{color_index, palette, render_overlay};
pub use train::{train_toy, TrainConfig, TrainOutcome};
