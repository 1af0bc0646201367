//! Streaming inference: backbone, video module, heads, post-processing and
//! flow-based id propagation, one frame at a time.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{block_match_flow, FlowField};
use crate::harness::config::{FlowSource, PipelineConfig, PredictionSource};
use crate::panoptic::{postprocess, ClassPartition, PanopticMap};
use crate::synth::{corrupt, SyntheticSequence, ToyBackbone, ToyHeads};
use crate::tensor::{NDArray, Rng};
use crate::tracking::{fresh_ids, TrackState, Tracker};
use crate::transformer::{StreamingVideoModule, VideoModule};

/// Wall time per stage for one frame, in milliseconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub frame: usize,
    pub backbone: f64,
    pub reduce: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub mlp: f64,
    pub expand: f64,
    pub memory: f64,
    pub heads: f64,
    pub postprocess: f64,
    pub flow: f64,
    pub tracking: f64,
    pub total: f64,
}

impl FrameTiming {
    /// Time spent in the video module.
    pub fn module(&self) -> f64 {
        self.reduce + self.spatial + self.temporal + self.mlp + self.expand + self.memory
    }
}

pub fn timing_csv(rows: &[FrameTiming]) -> String {
    let mut out = String::from(
        "frame,backbone_ms,reduce_ms,spatial_ms,temporal_ms,mlp_ms,expand_ms,memory_ms,heads_ms,postprocess_ms,flow_ms,tracking_ms,total_ms\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.frame,
            r.backbone,
            r.reduce,
            r.spatial,
            r.temporal,
            r.mlp,
            r.expand,
            r.memory,
            r.heads,
            r.postprocess,
            r.flow,
            r.tracking,
            r.total
        );
    }
    out
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// What the pipeline may see at frame `t`: the current image and, for the
/// injection modes and ground-truth flow, the current annotations.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub image: &'a NDArray<u8>,
    pub gt_panoptic: Option<&'a PanopticMap>,
    /// Backward flow from the previous frame to this one.
    pub gt_flow: Option<&'a FlowField>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub panoptic: PanopticMap,
    pub timing: FrameTiming,
}

struct Neural {
    backbone: ToyBackbone,
    stream: StreamingVideoModule<f32>,
    heads: ToyHeads<f32>,
}

/// Stateful per-video pipeline. Memory, track state and the previous image
/// are the only things carried between frames.
pub struct Pipeline {
    config: PipelineConfig,
    partition: ClassPartition,
    dims: (usize, usize),
    neural: Option<Neural>,
    tracker: Tracker,
    fresh: TrackState,
    corrupt_rng: Rng,
    previous_image: Option<NDArray<u8>>,
    frame: usize,
}

impl Pipeline {
    /// Seeded, untrained models.
    pub fn new(
        config: PipelineConfig,
        partition: ClassPartition,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let mc = config.module_config(height, width)?;
        let module = VideoModule::new(mc, config.model_seed)?;
        let heads = ToyHeads::new(
            config.channels,
            partition.classes(),
            config.stride,
            config.model_seed,
        )?;
        Self::with_models(config, partition, height, width, module, heads)
    }

    /// Uses the given (for example trained) video module and heads.
    pub fn with_models(
        config: PipelineConfig,
        partition: ClassPartition,
        height: usize,
        width: usize,
        module: VideoModule<f32>,
        heads: ToyHeads<f32>,
    ) -> Result<Self> {
        let mc = config.module_config(height, width)?;
        if module.config() != &mc {
            return Err(Error::Config(
                "video module does not match the pipeline configuration".into(),
            ));
        }
        if heads.classes() != partition.classes().as_slice() {
            return Err(Error::Config(
                "head classes do not match the partition".into(),
            ));
        }
        partition.validate()?;
        let neural = match config.prediction {
            PredictionSource::ToyHeads => Some(Neural {
                backbone: ToyBackbone::new(config.stride, config.channels, config.backbone_seed)?,
                stream: StreamingVideoModule::new(module)?,
                heads,
            }),
            _ => None,
        };
        Ok(Self {
            tracker: Tracker::new(partition.clone(), config.tracker_threshold),
            corrupt_rng: Rng::fork(config.corruption_seed, 3),
            config,
            partition,
            dims: (height, width),
            neural,
            fresh: TrackState::default(),
            previous_image: None,
            frame: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn frames_seen(&self) -> usize {
        self.frame
    }

    pub fn step(&mut self, input: FrameInput<'_>) -> Result<FrameOutput> {
        let (h, w) = self.dims;
        if input.image.dims() != [h, w, 3] {
            return Err(Error::shape(
                "pipeline_step",
                &[h, w, 3],
                input.image.dims(),
            ));
        }
        let start = Instant::now();
        let mut timing = FrameTiming {
            frame: self.frame,
            ..FrameTiming::default()
        };

        let predicted = match &mut self.neural {
            Some(n) => {
                let t0 = Instant::now();
                let image = input.image.map(|v| v as f32 / 255.0);
                let features = n.backbone.forward(&image)?;
                timing.backbone = ms(t0.elapsed());
                let (y, st) = n.stream.step_timed(&features)?;
                timing.reduce = ms(st.reduce);
                timing.spatial = ms(st.spatial);
                timing.temporal = ms(st.temporal);
                timing.mlp = ms(st.mlp);
                timing.expand = ms(st.expand);
                timing.memory = ms(st.memory_push);
                let t1 = Instant::now();
                let out = n.heads.forward(&y)?;
                timing.heads = ms(t1.elapsed());
                let t2 = Instant::now();
                let map = postprocess(
                    &out.semantic,
                    &out.heatmap,
                    &out.offsets,
                    &self.partition,
                    self.config.centers,
                )?;
                timing.postprocess = ms(t2.elapsed());
                map
            }
            None => {
                let gt = input.gt_panoptic.ok_or_else(|| {
                    Error::Usage("ground-truth injection needs the current annotation".into())
                })?;
                if (gt.height, gt.width) != (h, w) {
                    return Err(Error::shape(
                        "pipeline_step",
                        &[h, w],
                        &[gt.height, gt.width],
                    ));
                }
                let masks = match self.config.prediction {
                    PredictionSource::GtCorrupt => corrupt(
                        gt,
                        &self.config.corruption,
                        &self.partition,
                        &mut self.corrupt_rng,
                    ),
                    _ => gt.clone(),
                };
                // per-frame local ids: identities must come from the tracker
                fresh_ids(&masks, &self.partition, &mut TrackState::default())?
            }
        };

        let panoptic = if self.config.tracking {
            let flow = match (&self.previous_image, self.config.flow_source) {
                (None, _) => None,
                (Some(_), FlowSource::Gt) => Some(input.gt_flow.cloned().ok_or_else(|| {
                    Error::Usage("ground-truth flow source needs the current flow".into())
                })?),
                (Some(prev), FlowSource::BlockMatch) => {
                    let t = Instant::now();
                    let f = block_match_flow(
                        prev,
                        input.image,
                        self.config.block_patch,
                        self.config.block_search,
                    )?;
                    timing.flow = ms(t.elapsed());
                    Some(f)
                }
            };
            let t = Instant::now();
            let out = self.tracker.step(&predicted, flow.as_ref())?;
            timing.tracking = ms(t.elapsed());
            out
        } else {
            let t = Instant::now();
            let out = fresh_ids(&predicted, &self.partition, &mut self.fresh)?;
            timing.tracking = ms(t.elapsed());
            out
        };

        self.previous_image = Some(input.image.clone());
        self.frame += 1;
        timing.total = ms(start.elapsed());
        Ok(FrameOutput { panoptic, timing })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub maps: Vec<PanopticMap>,
    pub timing: Vec<FrameTiming>,
}

fn frame_inputs(seq: &SyntheticSequence, t: usize) -> FrameInput<'_> {
    FrameInput {
        image: &seq.frames[t],
        gt_panoptic: Some(&seq.gt_panoptic[t]),
        gt_flow: Some(&seq.gt_flow[t]),
    }
}

/// Runs a fresh pipeline over every frame of `seq`.
pub fn run_pipeline(seq: &SyntheticSequence, config: &PipelineConfig) -> Result<PipelineOutput> {
    let pipeline = Pipeline::new(
        config.clone(),
        seq.partition.clone(),
        seq.config.height,
        seq.config.width,
    )?;
    run_with(pipeline, seq)
}

pub fn run_with(mut pipeline: Pipeline, seq: &SyntheticSequence) -> Result<PipelineOutput> {
    let mut out = PipelineOutput {
        maps: Vec::with_capacity(seq.len()),
        timing: Vec::with_capacity(seq.len()),
    };
    for t in 0..seq.len() {
        let f = pipeline.step(frame_inputs(seq, t))?;
        out.maps.push(f.panoptic);
        out.timing.push(f.timing);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{vpq_average, MatchParams};
    use crate::synth::{generate_sequence, SceneConfig};
    use crate::transformer::AttentionVariant;

    fn scene(n_frames: usize) -> SceneConfig {
        SceneConfig {
            n_frames,
            non_overlapping: true,
            stay_inside: true,
            min_size: 8,
            ..SceneConfig::default()
        }
    }

    fn injected(tracking: bool) -> PipelineConfig {
        PipelineConfig {
            prediction: PredictionSource::GtInject,
            tracking,
            ..PipelineConfig::default()
        }
    }

    // Same masks up to a relabelling of instance ids.
    fn same_masks(a: &PanopticMap, b: &PanopticMap) -> bool {
        let mut fwd = std::collections::HashMap::new();
        let mut bwd = std::collections::HashMap::new();
        a.classes == b.classes
            && a.instances
                .iter()
                .zip(&b.instances)
                .all(|(&x, &y)| *fwd.entry(x).or_insert(y) == y && *bwd.entry(y).or_insert(x) == x)
    }

    #[test]
    fn perfect_pipeline_scores_100() {
        let seq = generate_sequence(&scene(16), 4).unwrap();
        let out = run_pipeline(&seq, &injected(true)).unwrap();
        let r = vpq_average(
            &out.maps,
            &seq.gt_panoptic,
            &[1, 5, 10, 15],
            &seq.partition,
            &MatchParams::default(),
        )
        .unwrap();
        for k in &r.per_k {
            assert_eq!(k.vpq, 100.0, "k = {}", k.k);
        }
    }

    #[test]
    fn tracking_changes_ids_only() {
        let seq = generate_sequence(&scene(8), 5).unwrap();
        for cfg in [
            injected(true),
            PipelineConfig {
                prediction: PredictionSource::ToyHeads,
                variant: AttentionVariant::LocalTimeSpace,
                memory: 2,
                ..PipelineConfig::default()
            },
        ] {
            let on = run_pipeline(&seq, &cfg).unwrap();
            let off = run_pipeline(
                &seq,
                &PipelineConfig {
                    tracking: false,
                    ..cfg
                },
            )
            .unwrap();
            for (a, b) in on.maps.iter().zip(&off.maps) {
                assert!(same_masks(a, b));
            }
        }
    }

    #[test]
    fn deterministic_toy_pipeline() {
        let seq = generate_sequence(&scene(5), 6).unwrap();
        let cfg = PipelineConfig {
            variant: AttentionVariant::GlobalTimeSpace,
            memory: 2,
            ..PipelineConfig::default()
        };
        let a = run_pipeline(&seq, &cfg).unwrap();
        let b = run_pipeline(&seq, &cfg).unwrap();
        assert_eq!(a.maps, b.maps);
        assert_eq!(a.timing.len(), 5);
        assert!(a.timing.iter().skip(1).all(|t| t.total > 0.0));
    }

    #[test]
    fn future_frames_are_never_read() {
        let seq = generate_sequence(&scene(8), 7).unwrap();
        let mut sentinel = seq.clone();
        for t in 4..8 {
            sentinel.frames[t] = NDArray::filled(seq.frames[t].dims(), 255);
            sentinel.gt_panoptic[t] = PanopticMap::void(seq.config.height, seq.config.width, 255);
            sentinel.gt_flow[t] =
                FlowField::uniform(seq.config.height, seq.config.width, 5.0, -3.0);
        }
        for cfg in [
            PipelineConfig {
                variant: AttentionVariant::LocalTimeSpace,
                memory: 3,
                flow_source: FlowSource::BlockMatch,
                ..PipelineConfig::default()
            },
            injected(true),
        ] {
            let a = run_pipeline(&seq, &cfg).unwrap();
            let b = run_pipeline(&sentinel, &cfg).unwrap();
            assert_eq!(a.maps[..4], b.maps[..4]);
        }
    }

    #[test]
    fn space_variant_is_per_frame() {
        let seq = generate_sequence(&scene(4), 8).unwrap();
        let cfg = PipelineConfig {
            tracking: false,
            ..PipelineConfig::default()
        };
        let full = run_pipeline(&seq, &cfg).unwrap();
        for t in 0..4 {
            let mut single = seq.clone();
            single.frames = vec![seq.frames[t].clone()];
            single.gt_panoptic = vec![seq.gt_panoptic[t].clone()];
            single.gt_flow = vec![seq.gt_flow[t].clone()];
            let one = run_pipeline(&single, &cfg).unwrap();
            assert!(same_masks(&one.maps[0], &full.maps[t]));
        }
    }

    #[test]
    fn inconsistent_config_fails_before_compute() {
        let seq = generate_sequence(&scene(3), 1).unwrap();
        let cfg = PipelineConfig {
            memory: 2,
            ..PipelineConfig::default()
        };
        assert!(matches!(run_pipeline(&seq, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn timing_csv_has_one_row_per_frame() {
        let csv = timing_csv(&[
            FrameTiming::default(),
            FrameTiming {
                frame: 1,
                ..Default::default()
            },
        ]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("frame,backbone_ms"));
    }
}
