//! Frame-by-frame inference with a memory of past frames.
//!
//! Each frame is reduced and projected to time-attention keys and values once,
//! when it enters the memory. Later frames reuse those projections, so the
//! per-frame time stage only pays for the attention itself.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::tensor::{NDArray, Scalar};
use crate::transformer::module::{KeyBias, ProjectedFrame, VideoModule};

/// Wall time spent in each part of one streaming step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub reduce: Duration,
    pub spatial: Duration,
    pub temporal: Duration,
    pub mlp: Duration,
    pub expand: Duration,
    pub memory_push: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.reduce + self.spatial + self.temporal + self.mlp + self.expand + self.memory_push
    }
}

/// A [`VideoModule`] with its per-sequence memory.
#[derive(Clone, Debug)]
pub struct StreamingVideoModule<T = f32> {
    module: VideoModule<T>,
    bias: Option<KeyBias<T>>,
    memory: VecDeque<ProjectedFrame<T>>,
    frame_dims: Option<Vec<usize>>,
}

impl<T: Scalar> StreamingVideoModule<T> {
    pub fn new(module: VideoModule<T>) -> Result<Self> {
        let bias = if module.config().variant.uses_memory() {
            Some(module.key_bias()?)
        } else {
            None
        };
        Ok(Self {
            module,
            bias,
            memory: VecDeque::new(),
            frame_dims: None,
        })
    }

    pub fn module(&self) -> &VideoModule<T> {
        &self.module
    }

    /// Number of past frames currently held.
    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }

    pub fn reset(&mut self) {
        self.memory.clear();
        self.frame_dims = None;
    }

    /// Processes the next frame and then adds it to the memory.
    pub fn step(&mut self, features: &NDArray<T>) -> Result<NDArray<T>> {
        self.step_timed(features).map(|(y, _)| y)
    }

    pub fn step_timed(&mut self, features: &NDArray<T>) -> Result<(NDArray<T>, StageTimes)> {
        if let Some(dims) = &self.frame_dims {
            if dims.as_slice() != features.dims() {
                return Err(Error::shape("stream_step", dims, features.dims()));
            }
        }
        let m = &self.module;
        let mut times = StageTimes::default();

        let t0 = Instant::now();
        let x = m.reduce(features)?;
        let t1 = Instant::now();
        let x1 = m.spatial_stage(&x)?;
        let t2 = Instant::now();
        let x2 = match &self.bias {
            Some(bias) if !self.memory.is_empty() => {
                let mem = self.memory.make_contiguous();
                m.temporal_stage(&x1, mem, bias)?
            }
            _ => x1,
        };
        let t3 = Instant::now();
        let x3 = m.mlp_stage(&x2)?;
        let t4 = Instant::now();
        let y = m.expand_residual(&x3, features)?;
        let t5 = Instant::now();
        let capacity = m.config().memory;
        if self.bias.is_some() && capacity > 0 {
            self.memory.push_back(m.project_memory_frame(&x)?);
            while self.memory.len() > capacity {
                self.memory.pop_front();
            }
        }
        let t6 = Instant::now();

        times.reduce = t1 - t0;
        times.spatial = t2 - t1;
        times.temporal = t3 - t2;
        times.mlp = t4 - t3;
        times.expand = t5 - t4;
        times.memory_push = t6 - t5;
        self.frame_dims = Some(features.dims().to_vec());
        Ok((y, times))
    }

    /// Time stage alone on the given reduced tokens against the current
    /// memory. Used for timing the attention factorizations in isolation.
    /// Adds a frame to the memory without producing an output for it.
    pub fn push_memory(&mut self, features: &NDArray<T>) -> Result<()> {
        if self.bias.is_none() {
            return Ok(());
        }
        if let Some(dims) = &self.frame_dims {
            if dims.as_slice() != features.dims() {
                return Err(Error::shape("stream_push", dims, features.dims()));
            }
        }
        let x = self.module.reduce(features)?;
        self.memory.push_back(self.module.project_memory_frame(&x)?);
        while self.memory.len() > self.module.config().memory {
            self.memory.pop_front();
        }
        self.frame_dims = Some(features.dims().to_vec());
        Ok(())
    }

    pub fn temporal_only(&mut self, x1: &NDArray<T>) -> Result<NDArray<T>> {
        let bias = self
            .bias
            .as_ref()
            .ok_or_else(|| Error::Config("space variant has no time stage".into()))?;
        let mem = self.memory.make_contiguous();
        self.module.temporal_stage(x1, mem, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use crate::transformer::config::{AttentionVariant, VideoModuleConfig};

    fn cfg(variant: AttentionVariant, memory: usize) -> VideoModuleConfig {
        VideoModuleConfig {
            channels: 5,
            dim: 4,
            memory,
            heads: 2,
            variant,
            height: 2,
            width: 3,
        }
    }

    #[test]
    fn streaming_matches_batch_forward_with_sliding_memory() {
        for variant in AttentionVariant::ALL {
            let s = if variant.uses_memory() { 2 } else { 0 };
            let module = VideoModule::<f64>::new(cfg(variant, s), 21).unwrap();
            let mut stream = StreamingVideoModule::new(module.clone()).unwrap();
            let mut rng = Rng::new(6);
            let frames: Vec<NDArray<f64>> = (0..5)
                .map(|_| rng.normal_array(&[1, 2, 3, 5], 0.0, 1.0))
                .collect();
            for (t, f) in frames.iter().enumerate() {
                let lo = t.saturating_sub(s);
                let want = module.forward(f, &frames[lo..t]).unwrap();
                let got = stream.step(f).unwrap();
                assert!(got.max_abs_diff(&want) < 1e-12, "{variant} frame {t}");
            }
            assert_eq!(stream.memory_len(), s);
        }
    }

    #[test]
    fn first_frame_skips_time_stage() {
        let module = VideoModule::<f64>::new(cfg(AttentionVariant::LocalTimeSpace, 3), 2).unwrap();
        let f: NDArray<f64> = Rng::new(1).normal_array(&[1, 2, 3, 5], 0.0, 1.0);
        let x1 = module.spatial_stage(&module.reduce(&f).unwrap()).unwrap();
        let want = module
            .expand_residual(&module.mlp_stage(&x1).unwrap(), &f)
            .unwrap();
        let mut stream = StreamingVideoModule::new(module).unwrap();
        assert_eq!(stream.step(&f).unwrap(), want);
    }

    #[test]
    fn rejects_changing_frame_dims() {
        let module = VideoModule::<f32>::new(cfg(AttentionVariant::GlobalTimeSpace, 1), 2).unwrap();
        let mut stream = StreamingVideoModule::new(module).unwrap();
        stream.step(&NDArray::zeros(&[1, 2, 3, 5])).unwrap();
        assert!(stream.step(&NDArray::zeros(&[2, 2, 3, 5])).is_err());
    }
}
