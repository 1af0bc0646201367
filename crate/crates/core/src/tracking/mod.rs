//! Instance id propagation by mutual best IoU between the flow-warped
//! previous output and the current prediction.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{warp_labels, FlowField};
use crate::panoptic::{ClassPartition, PanopticMap};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;

/// One thing instance of a frame: its labels and sorted pixel indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub class_id: u32,
    pub instance_id: u32,
    pub pixels: Vec<u32>,
}

impl Segment {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Thing segments of a map (instance id > 0), ordered by `(class, instance)`.
pub fn segments(map: &PanopticMap, partition: &ClassPartition) -> Vec<Segment> {
    let mut by_key: BTreeMap<(u32, u32), Vec<u32>> = BTreeMap::new();
    for (i, (&c, &id)) in map.classes.iter().zip(&map.instances).enumerate() {
        if id > 0 && partition.is_thing(c) {
            by_key.entry((c, id)).or_default().push(i as u32);
        }
    }
    by_key
        .into_iter()
        .map(|((class_id, instance_id), pixels)| Segment {
            class_id,
            instance_id,
            pixels,
        })
        .collect()
}

fn intersection(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `|a ∩ b| / |a ∪ b|`; 0 when both are empty.
pub fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = intersection(&a.pixels, &b.pixels);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    /// Index into the warped segment list.
    pub warped: usize,
    /// Index into the current segment list.
    pub current: usize,
    pub iou: f64,
}

// Index of the preferred counterpart: highest IoU, then larger area, then
// lower instance id. Only same-class candidates with positive IoU qualify.
fn best_counterpart(s: &Segment, others: &[Segment], ious: impl Fn(usize) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, o) in others.iter().enumerate() {
        if o.class_id != s.class_id {
            continue;
        }
        let v = ious(j);
        if v <= 0.0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((b, bv)) => {
                let cand = &others[b];
                v > bv
                    || (v == bv
                        && (o.area() > cand.area()
                            || (o.area() == cand.area() && o.instance_id < cand.instance_id)))
            }
        };
        if better {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

/// Pairs that are each other's best same-class counterpart with IoU above
/// `threshold`, ordered by current index.
pub fn mutual_best_match(warped: &[Segment], current: &[Segment], threshold: f64) -> Vec<Match> {
    let table: Vec<Vec<f64>> = warped
        .iter()
        .map(|w| {
            current
                .iter()
                .map(|c| {
                    if c.class_id == w.class_id {
                        iou(w, c)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let best_for_warped: Vec<Option<usize>> = warped
        .iter()
        .enumerate()
        .map(|(i, w)| best_counterpart(w, current, |j| table[i][j]))
        .collect();
    let mut out = Vec::new();
    for (j, c) in current.iter().enumerate() {
        if let Some(i) = best_counterpart(c, warped, |i| table[i][j]) {
            if best_for_warped[i] == Some(j) && table[i][j] > threshold {
                out.push(Match {
                    warped: i,
                    current: j,
                    iou: table[i][j],
                });
            }
        }
    }
    out
}

/// Global id counter. Ids start at 1 and only grow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrackState {
    pub next_global_id: u32,
    /// Current-frame instance id → global id of the last propagated frame.
    pub mapping: BTreeMap<u32, u32>,
}

impl Default for TrackState {
    fn default() -> Self {
        Self {
            next_global_id: 1,
            mapping: BTreeMap::new(),
        }
    }
}

impl TrackState {
    pub fn fresh_id(&mut self) -> u32 {
        let id = self.next_global_id;
        self.next_global_id += 1;
        id
    }
}

/// Rewrites the instance ids of `current` to global ids. Matched instances
/// inherit the warped segment's id (the warped map already carries global
/// ids); all others receive fresh ids in `(class, instance)` order.
pub fn propagate_ids(
    matches: &[Match],
    warped: &[Segment],
    current: &[Segment],
    current_map: &PanopticMap,
    state: &mut TrackState,
) -> Result<PanopticMap> {
    let mut inherited: BTreeMap<usize, u32> = BTreeMap::new();
    let mut used = BTreeMap::new();
    for m in matches {
        let gid = warped[m.warped].instance_id;
        if used.insert(gid, m.current).is_some() || inherited.insert(m.current, gid).is_some() {
            return Err(Error::Invariant(format!("global id {gid} inherited twice")));
        }
    }
    let mut remap: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    state.mapping.clear();
    for (j, seg) in current.iter().enumerate() {
        let gid = match inherited.get(&j) {
            Some(&g) => g,
            None => state.fresh_id(),
        };
        remap.insert((seg.class_id, seg.instance_id), gid);
        state.mapping.insert(seg.instance_id, gid);
    }
    let mut out = current_map.clone();
    for (c, i) in out.classes.iter().zip(out.instances.iter_mut()) {
        if *i > 0 {
            if let Some(&g) = remap.get(&(*c, *i)) {
                *i = g;
            }
        }
    }
    Ok(out)
}

/// Stateful tracker for one video.
#[derive(Clone, Debug)]
pub struct Tracker {
    partition: ClassPartition,
    threshold: f64,
    state: TrackState,
    previous: Option<PanopticMap>,
}

impl Tracker {
    pub fn new(partition: ClassPartition, threshold: f64) -> Self {
        Self {
            partition,
            threshold,
            state: TrackState::default(),
            previous: None,
        }
    }

    pub fn state(&self) -> &TrackState {
        &self.state
    }

    /// Assigns global ids to `current`. `flow` maps the previous frame onto
    /// this one and is ignored on the first frame.
    pub fn step(&mut self, current: &PanopticMap, flow: Option<&FlowField>) -> Result<PanopticMap> {
        let cur_segs = segments(current, &self.partition);
        let (warped_segs, matches) = match (&self.previous, flow) {
            (Some(prev), Some(flow)) => {
                let warped = warp_labels(prev, flow, self.partition.void_id)?;
                let ws = segments(&warped, &self.partition);
                let m = mutual_best_match(&ws, &cur_segs, self.threshold);
                (ws, m)
            }
            (Some(_), None) => {
                return Err(Error::Usage("flow required after the first frame".into()))
            }
            (None, _) => (Vec::new(), Vec::new()),
        };
        let out = propagate_ids(&matches, &warped_segs, &cur_segs, current, &mut self.state)?;
        self.previous = Some(out.clone());
        Ok(out)
    }
}

/// Gives every thing instance of `map` a fresh global id (no association).
pub fn fresh_ids(
    map: &PanopticMap,
    partition: &ClassPartition,
    state: &mut TrackState,
) -> Result<PanopticMap> {
    let segs = segments(map, partition);
    propagate_ids(&[], &[], &segs, map, state)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackInstance {
    pub global_id: u32,
    pub class_id: u32,
    pub area: usize,
}

/// One line of the track output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: usize,
    pub instances: Vec<TrackInstance>,
}

impl TrackRecord {
    pub fn from_map(frame: usize, map: &PanopticMap, partition: &ClassPartition) -> Self {
        let instances = segments(map, partition)
            .into_iter()
            .map(|s| TrackInstance {
                global_id: s.instance_id,
                class_id: s.class_id,
                area: s.area(),
            })
            .collect();
        Self { frame, instances }
    }
}

pub fn write_track_lines(mut w: impl Write, records: &[TrackRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
