//! Optical-flow utilities: categorical label warping, the correlation layer,
//! a photometric loss and a block-matching flow estimator.
//!
//! Flow is backward (target-indexed): pixel `(y, x)` of frame `t` sources
//! from `(y - v, x - u)` in frame `t - 1`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::panoptic::PanopticMap;
use crate::tensor::io::{read_tsr, write_tsr, TsrTensor};
use crate::tensor::NDArray;

/// Per-pixel `(u, v)` displacements, stored `[H, W, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    field: NDArray<f32>,
}

impl FlowField {
    pub fn new(field: NDArray<f32>) -> Result<Self> {
        let d = field.dims();
        if d.len() != 3 || d[2] != 2 {
            return Err(Error::shape("flow_field", d, &[0, 0, 2]));
        }
        if !field.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("flow contains non-finite values".into()));
        }
        Ok(Self { field })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            field: NDArray::zeros(&[height, width, 2]),
        }
    }

    /// The same `(u, v)` at every pixel.
    pub fn uniform(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self {
            field: NDArray::from_fn(&[height, width, 2], |i| if i % 2 == 0 { u } else { v }),
        }
    }

    pub fn height(&self) -> usize {
        self.field.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.field.dims()[1]
    }

    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = 2 * (y * self.width() + x);
        let d = self.field.data();
        (d[i], d[i + 1])
    }

    pub fn set(&mut self, y: usize, x: usize, u: f32, v: f32) {
        let i = 2 * (y * self.width() + x);
        let d = self.field.data_mut();
        d[i] = u;
        d[i + 1] = v;
    }

    pub fn as_array(&self) -> &NDArray<f32> {
        &self.field
    }

    pub fn max_magnitude(&self) -> f32 {
        self.field
            .data()
            .chunks(2)
            .map(|c| c[0].hypot(c[1]))
            .fold(0.0, f32::max)
    }

    /// Source pixel of `(y, x)` under nearest sampling, if inside the image.
    pub fn source(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let (u, v) = self.at(y, x);
        let sy = (y as f32 - v).round();
        let sx = (x as f32 - u).round();
        if sy < 0.0 || sx < 0.0 || sy >= self.height() as f32 || sx >= self.width() as f32 {
            None
        } else {
            Some((sy as usize, sx as usize))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tsr(path, &TsrTensor::from(&self.field))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let field = read_tsr(path)?
            .into_float::<f32>()
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: "flow must be a float tensor".into(),
            })?;
        Self::new(field)
    }
}

/// Backward warp of a panoptic map with nearest sampling. Pixels whose
/// source falls outside the image become void.
pub fn warp_labels(prev: &PanopticMap, flow: &FlowField, void_id: u32) -> Result<PanopticMap> {
    let (h, w) = (prev.height, prev.width);
    if flow.height() != h || flow.width() != w {
        return Err(Error::shape(
            "warp_labels",
            &[h, w],
            &[flow.height(), flow.width()],
        ));
    }
    let mut out = PanopticMap::void(h, w, void_id);
    for y in 0..h {
        for x in 0..w {
            if let Some((sy, sx)) = flow.source(y, x) {
                let (c, i) = prev.label(sy * w + sx);
                out.classes[y * w + x] = c;
                out.instances[y * w + x] = i;
            }
        }
    }
    Ok(out)
}

/// Backward warp of an `[H, W, C]` image with nearest sampling. Returns the
/// warped image and the mask of pixels whose source was inside the image.
pub fn warp_image(prev: &NDArray<f32>, flow: &FlowField) -> Result<(NDArray<f32>, Vec<bool>)> {
    let d = prev.dims();
    if d.len() != 3 || d[0] != flow.height() || d[1] != flow.width() {
        return Err(Error::shape(
            "warp_image",
            d,
            &[flow.height(), flow.width()],
        ));
    }
    let (h, w, c) = (d[0], d[1], d[2]);
    let mut out = NDArray::zeros(d);
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if let Some((sy, sx)) = flow.source(y, x) {
                let dst = (y * w + x) * c;
                let src = (sy * w + sx) * c;
                out.data_mut()[dst..dst + c].copy_from_slice(&prev.data()[src..src + c]);
                valid[y * w + x] = true;
            }
        }
    }
    Ok((out, valid))
}

fn normalize_pixels(f: &NDArray<f32>) -> Vec<f32> {
    let c = f.dims()[2];
    let mut out = f.data().to_vec();
    for px in out.chunks_mut(c) {
        let n = px.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n > 0.0 {
            px.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Correlation layer: `out[y, x, k] = <f1(y, x), f2(y + dy, x + dx)>` on
/// per-pixel L2-normalized features, for displacement index
/// `k = (dy + m)·(2m + 1) + (dx + m)`. Out-of-bounds samples give 0.
pub fn correlation(f1: &NDArray<f32>, f2: &NDArray<f32>, max_disp: usize) -> Result<NDArray<f32>> {
    if f1.ndim() != 3 || f1.dims() != f2.dims() {
        return Err(Error::shape("correlation", f1.dims(), f2.dims()));
    }
    let (h, w, c) = (f1.dims()[0], f1.dims()[1], f1.dims()[2]);
    let a = normalize_pixels(f1);
    let b = normalize_pixels(f2);
    let m = max_disp as isize;
    let span = 2 * max_disp + 1;
    let mut out = NDArray::zeros(&[h, w, span * span]);
    let o = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let pa = &a[(y * w + x) * c..(y * w + x + 1) * c];
            for dy in -m..=m {
                for dx in -m..=m {
                    let (ty, tx) = (y as isize + dy, x as isize + dx);
                    if ty < 0 || tx < 0 || ty >= h as isize || tx >= w as isize {
                        continue;
                    }
                    let q = ty as usize * w + tx as usize;
                    let pb = &b[q * c..(q + 1) * c];
                    let k = (dy + m) as usize * span + (dx + m) as usize;
                    o[(y * w + x) * span * span + k] = pa.iter().zip(pb).map(|(p, q)| p * q).sum();
                }
            }
        }
    }
    Ok(out)
}

/// Mean absolute difference between two `[H, W, C]` images over the valid
/// pixels (averaged over channels too).
pub fn photometric_loss(
    warped: &NDArray<f32>,
    actual: &NDArray<f32>,
    valid: &[bool],
) -> Result<f64> {
    if warped.dims() != actual.dims() || warped.ndim() != 3 {
        return Err(Error::shape(
            "photometric_loss",
            warped.dims(),
            actual.dims(),
        ));
    }
    let c = warped.dims()[2];
    if valid.len() * c != warped.len() {
        return Err(Error::shape(
            "photometric_loss",
            warped.dims(),
            &[valid.len()],
        ));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        for k in 0..c {
            total += (warped.data()[i * c + k] as f64 - actual.data()[i * c + k] as f64).abs();
        }
        count += c;
    }
    if count == 0 {
        return Err(Error::Invalid(
            "photometric loss over an empty valid mask".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Displacement candidates ordered by the tie rule: magnitude, then
/// row-major `(v, u)`.
fn candidates(search: usize) -> Vec<(i64, i64)> {
    let s = search as i64;
    let mut out: Vec<(i64, i64)> = (-s..=s)
        .flat_map(|v| (-s..=s).map(move |u| (v, u)))
        .collect();
    out.sort_by_key(|&(v, u)| (v * v + u * u, v, u));
    out
}

/// Dense block matching on `[H, W, C]` 8-bit images. For each pixel of
/// `cur`, picks the displacement `(u, v)` within `±search` whose source patch
/// in `prev` has the smallest sum of absolute differences. Source
/// coordinates are clamped at the border. Ties go to the smallest
/// displacement, then row-major.
pub fn block_match_flow(
    prev: &NDArray<u8>,
    cur: &NDArray<u8>,
    patch: usize,
    search: usize,
) -> Result<FlowField> {
    if prev.dims() != cur.dims() || prev.ndim() != 3 {
        return Err(Error::shape("block_match_flow", prev.dims(), cur.dims()));
    }
    if patch.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "patch size must be odd, got {patch}"
        )));
    }
    let (h, w, c) = (cur.dims()[0], cur.dims()[1], cur.dims()[2]);
    let r = (patch / 2) as i64;
    let (pd, cd) = (prev.data(), cur.data());
    let mut best_cost = vec![u64::MAX; h * w];
    let mut flow = FlowField::zeros(h, w);
    // integral image of per-pixel costs, (h+1)×(w+1)
    let mut sat = vec![0u64; (h + 1) * (w + 1)];
    for (v, u) in candidates(search) {
        for y in 0..h {
            let sy = (y as i64 - v).clamp(0, h as i64 - 1) as usize;
            let mut row = 0u64;
            for x in 0..w {
                let sx = (x as i64 - u).clamp(0, w as i64 - 1) as usize;
                let a = &cd[(y * w + x) * c..(y * w + x + 1) * c];
                let b = &pd[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                row += a
                    .iter()
                    .zip(b)
                    .map(|(&p, &q)| p.abs_diff(q) as u64)
                    .sum::<u64>();
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        for y in 0..h {
            let y0 = (y as i64 - r).max(0) as usize;
            let y1 = (y as i64 + r + 1).min(h as i64) as usize;
            for x in 0..w {
                let x0 = (x as i64 - r).max(0) as usize;
                let x1 = (x as i64 + r + 1).min(w as i64) as usize;
                let cost = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
                    - sat[y0 * (w + 1) + x1]
                    - sat[y1 * (w + 1) + x0];
                if cost < best_cost[y * w + x] {
                    best_cost[y * w + x] = cost;
                    flow.set(y, x, u as f32, v as f32);
                }
            }
        }
    }
    Ok(flow)
}
