//! Fits the video module and toy heads to one synthetic sequence by plain
//! gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{head_targets, HeadTargets, SyntheticSequence, ToyBackbone, ToyHeads};
use crate::tensor::{NDArray, Tape};
use crate::transformer::{AttentionVariant, VideoModule, VideoModuleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: AttentionVariant,
    pub memory: usize,
    pub dim: usize,
    pub heads: usize,
    pub channels: usize,
    pub stride: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Frames used per step, from the start of the sequence.
    pub frames: usize,
    pub center_weight: f64,
    pub offset_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::LocalTimeSpace,
            memory: 2,
            dim: 16,
            heads: 2,
            channels: 16,
            stride: 4,
            steps: 200,
            learning_rate: 0.1,
            frames: 4,
            center_weight: 1.0,
            offset_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Composite loss before each step, plus the final loss.
    pub losses: Vec<f64>,
    pub module: VideoModule<f32>,
    pub heads: ToyHeads<f32>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap()
    }
}

struct Sample {
    features: NDArray<f32>,
    memory: Vec<NDArray<f32>>,
    targets: HeadTargets<f32>,
}

pub fn train_toy(seq: &SyntheticSequence, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (h, w) = (seq.config.height, seq.config.width);
    if cfg.frames == 0 || cfg.frames > seq.len() {
        return Err(Error::Config(format!(
            "cannot train on {} of {} frames",
            cfg.frames,
            seq.len()
        )));
    }
    if h % cfg.stride != 0 || w % cfg.stride != 0 {
        return Err(Error::Config(format!(
            "stride {} does not divide {h}×{w}",
            cfg.stride
        )));
    }
    let mc = VideoModuleConfig {
        channels: cfg.channels,
        dim: cfg.dim,
        memory: cfg.memory,
        heads: cfg.heads,
        variant: cfg.variant,
        height: h / cfg.stride,
        width: w / cfg.stride,
    };
    let mut module = VideoModule::<f32>::new(mc, cfg.seed)?;
    let classes = seq.partition.classes();
    let mut heads = ToyHeads::<f32>::new(cfg.channels, classes.clone(), cfg.stride, cfg.seed)?;
    let backbone = ToyBackbone::new(cfg.stride, cfg.channels, cfg.seed)?;

    let features = (0..cfg.frames)
        .map(|t| backbone.forward(&seq.frame_f32(t)))
        .collect::<Result<Vec<_>>>()?;
    let samples = (0..cfg.frames)
        .map(|t| {
            let lo = t.saturating_sub(cfg.memory);
            Ok(Sample {
                features: features[t].clone(),
                memory: if cfg.variant.uses_memory() {
                    features[lo..t].to_vec()
                } else {
                    Vec::new()
                },
                targets: head_targets(&seq.gt_panoptic[t], &seq.partition, &classes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let lr = cfg.learning_rate as f32;
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        module.params_mut().zero_grad();
        heads.params_mut().zero_grad();
        let mut total = 0.0;
        for s in &samples {
            let mut tape = Tape::new();
            let fv = tape.input(s.features.clone());
            let y = module.forward_tape(&mut tape, fv, &s.memory)?;
            let (logits, heat, off) = heads.forward_tape(&mut tape, y)?;
            let ce = tape.cross_entropy(logits, &s.targets.class_index)?;
            let lh = tape.mse(heat, &s.targets.heatmap)?;
            let lo = tape.mse(off, &s.targets.offsets)?;
            let lh = tape.scale(lh, cfg.center_weight as f32);
            let lo = tape.scale(lo, cfg.offset_weight as f32);
            let l = tape.add(ce, lh)?;
            let l = tape.add(l, lo)?;
            let l = tape.scale(l, 1.0 / samples.len() as f32);
            total += tape.value(l).data()[0] as f64;
            if step < cfg.steps {
                let g = tape.backward(l)?;
                g.accumulate(module.params_mut());
                g.accumulate(heads.params_mut());
            }
        }
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss diverged at step {step}"
            )));
        }
        losses.push(total);
        if step < cfg.steps {
            module.params_mut().sgd_step(lr);
            heads.params_mut().sgd_step(lr);
        }
    }
    Ok(TrainOutcome {
        losses,
        module,
        heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sequence, SceneConfig};

    #[test]
    fn short_run_lowers_loss() {
        let seq = generate_sequence(
            &SceneConfig {
                n_frames: 3,
                ..SceneConfig::default()
            },
            1,
        )
        .unwrap();
        let cfg = TrainConfig {
            steps: 10,
            frames: 2,
            ..TrainConfig::default()
        };
        let out = train_toy(&seq, &cfg).unwrap();
        assert_eq!(out.losses.len(), 11);
        assert!(out.final_loss() < out.initial_loss());
    }

    #[test]
    fn too_many_frames_rejected() {
        let seq = generate_sequence(
            &SceneConfig {
                n_frames: 2,
                ..SceneConfig::default()
            },
            1,
        )
        .unwrap();
        let cfg = TrainConfig {
            frames: 3,
            ..TrainConfig::default()
        };
        assert!(train_toy(&seq, &cfg).is_err());
    }
}
