//! Center extraction, offset grouping and semantic/instance fusion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::types::{ClassPartition, PanopticMap, SemanticMap};
use crate::tensor::NDArray;

/// A detected instance center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Center {
    pub y: usize,
    pub x: usize,
    pub score: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CenterParams {
    pub threshold: f32,
    pub nms_window: usize,
    pub top_k: usize,
}

impl Default for CenterParams {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            nms_window: 7,
            top_k: 200,
        }
    }
}

fn check_grid(
    op: &'static str,
    a: &NDArray<f32>,
    channels: Option<usize>,
) -> Result<(usize, usize)> {
    let d = a.dims();
    let ok = match channels {
        None => d.len() == 2,
        Some(c) => d.len() == 3 && d[2] == c,
    };
    if !ok {
        return Err(Error::shape(op, d, &[0, 0, channels.unwrap_or(1)]));
    }
    Ok((d[0], d[1]))
}

/// Window local maxima of `heatmap` ([H, W]) with score at least
/// `threshold`, sorted by score descending then row-major, truncated to
/// `top_k`.
pub fn find_centers(heatmap: &NDArray<f32>, params: CenterParams) -> Result<Vec<Center>> {
    let (h, w) = check_grid("find_centers", heatmap, None)?;
    if params.nms_window.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "nms window must be odd, got {}",
            params.nms_window
        )));
    }
    let r = params.nms_window / 2;
    let hm = heatmap.data();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let s = hm[y * w + x];
            // also skips NaN scores
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(s >= params.threshold) {
                continue;
            }
            let mut is_max = true;
            'win: for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    if hm[yy * w + xx] > s {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                out.push(Center { y, x, score: s });
            }
        }
    }
    // stable sort keeps row-major order among equal scores
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(params.top_k);
    Ok(out)
}

/// Assigns each foreground pixel the 1-based index of the center closest to
/// `pixel + offset` (offsets are `[H, W, 2]` as `(dy, dx)`). Ties go to the
/// lowest index; background pixels get 0.
pub fn group_instances(
    offsets: &NDArray<f32>,
    centers: &[Center],
    foreground: &[bool],
) -> Result<Vec<u32>> {
    let (h, w) = check_grid("group_instances", offsets, Some(2))?;
    if foreground.len() != h * w {
        return Err(Error::shape(
            "group_instances",
            &[h, w],
            &[foreground.len()],
        ));
    }
    let off = offsets.data();
    let mut ids = vec![0u32; h * w];
    for (i, (&fg, id)) in foreground.iter().zip(ids.iter_mut()).enumerate() {
        if !fg {
            continue;
        }
        if centers.is_empty() {
            return Err(Error::Invalid(
                "foreground pixels present but no centers found".into(),
            ));
        }
        let py = (i / w) as f64 + off[2 * i] as f64;
        let px = (i % w) as f64 + off[2 * i + 1] as f64;
        let mut best = (f64::INFINITY, 0usize);
        for (k, c) in centers.iter().enumerate() {
            let dy = py - c.y as f64;
            let dx = px - c.x as f64;
            let d2 = dy * dy + dx * dx;
            if d2 < best.0 {
                best = (d2, k);
            }
        }
        *id = best.1 as u32 + 1;
    }
    Ok(ids)
}

/// Fuses a semantic map with class-agnostic instance ids.
///
/// Each instance takes the most frequent thing class among its pixels (ties
/// to the smallest class id). Instances without any thing pixel are
/// dissolved and their pixels keep their semantic labels. Thing pixels outside
/// every instance become void, and stuff segments smaller than
/// `stuff_min_area` become void (0 disables the filter).
pub fn merge_panoptic(
    semantic: &SemanticMap,
    instance_ids: &[u32],
    partition: &ClassPartition,
    stuff_min_area: usize,
) -> Result<PanopticMap> {
    let n = semantic.height * semantic.width;
    if instance_ids.len() != n {
        return Err(Error::shape(
            "merge_panoptic",
            &[semantic.height, semantic.width],
            &[instance_ids.len()],
        ));
    }
    let mut votes: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (&c, &id) in semantic.labels.iter().zip(instance_ids) {
        if id > 0 {
            let v = votes.entry(id).or_default();
            if partition.is_thing(c) {
                *v.entry(c).or_insert(0) += 1;
            }
        }
    }
    let winner: BTreeMap<u32, u32> = votes
        .iter()
        .filter_map(|(&id, hist)| {
            // BTreeMap iterates classes ascending, so strict `>` keeps the smallest on ties
            let mut best: Option<(u32, usize)> = None;
            for (&c, &k) in hist {
                if best.is_none_or(|(_, bk)| k > bk) {
                    best = Some((c, k));
                }
            }
            best.map(|(c, _)| (id, c))
        })
        .collect();

    let mut classes = Vec::with_capacity(n);
    let mut instances = Vec::with_capacity(n);
    for (&c, &id) in semantic.labels.iter().zip(instance_ids) {
        match winner.get(&id) {
            Some(&cls) if id > 0 => {
                classes.push(cls);
                instances.push(id);
            }
            _ => {
                let keep = partition.is_stuff(c);
                classes.push(if keep { c } else { partition.void_id });
                instances.push(0);
            }
        }
    }
    if stuff_min_area > 0 {
        let mut area: BTreeMap<u32, usize> = BTreeMap::new();
        for (&c, &i) in classes.iter().zip(&instances) {
            if i == 0 && partition.is_stuff(c) {
                *area.entry(c).or_insert(0) += 1;
            }
        }
        for c in classes.iter_mut() {
            if area.get(c).is_some_and(|&a| a < stuff_min_area) {
                *c = partition.void_id;
            }
        }
    }
    PanopticMap::new(semantic.height, semantic.width, classes, instances)
}

/// Complete bottom-up post-processing: centers, grouping over the thing
/// foreground, fusion.
pub fn postprocess(
    semantic: &SemanticMap,
    heatmap: &NDArray<f32>,
    offsets: &NDArray<f32>,
    partition: &ClassPartition,
    params: CenterParams,
) -> Result<PanopticMap> {
    let fg = semantic.foreground(partition);
    let centers = find_centers(heatmap, params)?;
    let ids = if centers.is_empty() {
        vec![0; fg.len()]
    } else {
        group_instances(offsets, &centers, &fg)?
    };
    merge_panoptic(semantic, &ids, partition, 0)
}
