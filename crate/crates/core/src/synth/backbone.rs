//! Seeded stand-ins for the backbone and the prediction heads.

use crate::error::{Error, Result};
use crate::panoptic::{ClassPartition, PanopticMap, SemanticMap};
use crate::tensor::kernels;
use crate::tensor::{NDArray, ParamId, ParamStore, Rng, Scalar, Tape, Var};
use crate::tracking::segments;

/// Fixed random projection of non-overlapping `stride × stride` RGB patches
/// followed by `tanh`.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    stride: usize,
    channels: usize,
    projection: NDArray<f32>,
    bias: NDArray<f32>,
}

impl ToyBackbone {
    pub fn new(stride: usize, channels: usize, seed: u64) -> Result<Self> {
        if stride == 0 || channels == 0 {
            return Err(Error::Config("stride and channels must be positive".into()));
        }
        let fan_in = stride * stride * 3;
        let mut rng = Rng::fork(seed, 7);
        Ok(Self {
            stride,
            channels,
            projection: rng.normal_array(&[fan_in, channels], 0.0, 2.0 / (fan_in as f64).sqrt()),
            bias: rng.uniform_array(&[channels], -0.5, 0.5),
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `[H, W, 3]` image in `[0, 1]` → `[1, H/stride, W/stride, channels]`.
    pub fn forward(&self, frame: &NDArray<f32>) -> Result<NDArray<f32>> {
        let d = frame.dims();
        if d.len() != 3 || d[2] != 3 {
            return Err(Error::shape("toy_backbone", d, &[0, 0, 3]));
        }
        let s = self.stride;
        if !d[0].is_multiple_of(s) || !d[1].is_multiple_of(s) {
            return Err(Error::Config(format!(
                "stride {s} does not divide {}×{}",
                d[0], d[1]
            )));
        }
        let (gh, gw) = (d[0] / s, d[1] / s);
        let fan_in = s * s * 3;
        let mut patches = Vec::with_capacity(gh * gw * fan_in);
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..s {
                    let row = ((gy * s + py) * d[1] + gx * s) * 3;
                    patches.extend(frame.data()[row..row + s * 3].iter().map(|v| 2.0 * v - 1.0));
                }
            }
        }
        let patches = NDArray::new(vec![gh * gw, fan_in], patches)?;
        let f = kernels::matmul(&patches, &self.projection)?;
        let f = kernels::add_broadcast(&f, &self.bias)?.map(f32::tanh);
        f.reshape(&[1, gh, gw, self.channels])
    }
}

/// One-shot backbone evaluation.
pub fn toy_backbone(
    frame: &NDArray<f32>,
    stride: usize,
    channels: usize,
    seed: u64,
) -> Result<NDArray<f32>> {
    ToyBackbone::new(stride, channels, seed)?.forward(frame)
}

/// Pixels per unit of the offset head output.
pub const OFFSET_SCALE: f64 = 8.0;

/// Dense predictions at full resolution.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    /// `[H, W, K]` logits over `classes`.
    pub logits: NDArray<f32>,
    pub semantic: SemanticMap,
    /// `[H, W]` in `[0, 1]`.
    pub heatmap: NDArray<f32>,
    /// `[H, W, 2]` `(dy, dx)` in pixels.
    pub offsets: NDArray<f32>,
}

/// Linear semantic, center and offset heads on backbone features, upsampled
/// to full resolution by nearest neighbour.
#[derive(Clone, Debug)]
pub struct ToyHeads<T = f32> {
    classes: Vec<u32>,
    stride: usize,
    store: ParamStore<T>,
    ids: [ParamId; 6],
}

impl<T: Scalar> ToyHeads<T> {
    pub fn new(channels: usize, classes: Vec<u32>, stride: usize, seed: u64) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Config("heads need at least one class".into()));
        }
        let mut rng = Rng::fork(seed, 11);
        let mut s = ParamStore::new();
        let k = classes.len();
        let ids = [
            s.add("semantic.weight", rng.xavier_uniform(channels, k))?,
            s.add("semantic.bias", NDArray::zeros(&[k]))?,
            s.add("center.weight", rng.xavier_uniform(channels, 1))?,
            s.add("center.bias", NDArray::zeros(&[1]))?,
            s.add("offset.weight", rng.xavier_uniform(channels, 2))?,
            s.add("offset.bias", NDArray::zeros(&[2]))?,
        ];
        Ok(Self {
            classes,
            stride,
            store: s,
            ids,
        })
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Records the heads on `tape`: `[1, h, w, C]` features to full-resolution
    /// `(logits [1,H,W,K], heatmap [1,H,W,1], offsets [1,H,W,2])`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, features: Var) -> Result<(Var, Var, Var)> {
        let mut head = |w: ParamId, b: ParamId| -> Result<Var> {
            let (w, b) = (tape.param(&self.store, w), tape.param(&self.store, b));
            let y = tape.matmul(features, w)?;
            let y = tape.add(y, b)?;
            tape.upsample_nearest(y, self.stride)
        };
        Ok((
            head(self.ids[0], self.ids[1])?,
            head(self.ids[2], self.ids[3])?,
            head(self.ids[4], self.ids[5])?,
        ))
    }
}

impl ToyHeads<f32> {
    pub fn forward(&self, features: &NDArray<f32>) -> Result<HeadOutputs> {
        let v = |i: usize| self.store.value(self.ids[i]);
        let head = |w: usize, b: usize| -> Result<NDArray<f32>> {
            let y = kernels::matmul(features, v(w))?;
            let y = kernels::add_broadcast(&y, v(b))?;
            kernels::upsample_nearest(&y, self.stride)
        };
        let logits = head(0, 1)?;
        let d = logits.dims().to_vec();
        let (h, w, k) = (d[1], d[2], d[3]);
        let logits = logits.reshape(&[h, w, k])?;
        let labels = logits
            .data()
            .chunks(k)
            .map(|row| {
                let arg = (0..k).fold(0, |a, j| if row[j] > row[a] { j } else { a });
                self.classes[arg]
            })
            .collect();
        let heatmap = head(2, 3)?.reshape(&[h, w])?.map(|x| x.clamp(0.0, 1.0));
        let offsets = head(4, 5)?
            .reshape(&[h, w, 2])?
            .map(|x| x * OFFSET_SCALE as f32);
        Ok(HeadOutputs {
            semantic: SemanticMap::new(h, w, labels)?,
            logits,
            heatmap,
            offsets,
        })
    }
}

/// Training targets derived from a ground-truth panoptic map.
#[derive(Clone, Debug)]
pub struct HeadTargets<T> {
    /// Index into the class list per pixel.
    pub class_index: Vec<usize>,
    /// `[1, H, W, 1]` Gaussian bumps (sigma 2 px) at instance centroids.
    pub heatmap: NDArray<T>,
    /// `[1, H, W, 2]` centroid minus pixel for thing pixels, divided by
    /// [`OFFSET_SCALE`].
    pub offsets: NDArray<T>,
}

pub fn head_targets<T: Scalar>(
    gt: &PanopticMap,
    partition: &ClassPartition,
    classes: &[u32],
) -> Result<HeadTargets<T>> {
    let (h, w) = (gt.height, gt.width);
    let class_index = gt
        .classes
        .iter()
        .map(|c| {
            classes
                .iter()
                .position(|k| k == c)
                .ok_or_else(|| Error::Invalid(format!("class {c} has no head output")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut heat = vec![0.0f64; h * w];
    let mut off = vec![0.0f64; h * w * 2];
    for seg in segments(gt, partition) {
        let n = seg.area() as f64;
        let cy = seg
            .pixels
            .iter()
            .map(|&p| (p as usize / w) as f64)
            .sum::<f64>()
            / n;
        let cx = seg
            .pixels
            .iter()
            .map(|&p| (p as usize % w) as f64)
            .sum::<f64>()
            / n;
        for (i, hv) in heat.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let g = (-((y - cy).powi(2) + (x - cx).powi(2)) / 8.0).exp();
            *hv = hv.max(g);
        }
        for &p in &seg.pixels {
            let p = p as usize;
            off[2 * p] = (cy - (p / w) as f64) / OFFSET_SCALE;
            off[2 * p + 1] = (cx - (p % w) as f64) / OFFSET_SCALE;
        }
    }
    Ok(HeadTargets {
        class_index,
        heatmap: NDArray::from_f64_slice(&[1, h, w, 1], &heat)?,
        offsets: NDArray::from_f64_slice(&[1, h, w, 2], &off)?,
    })
}
