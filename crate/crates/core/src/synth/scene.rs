use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::panoptic::{ClassPartition, PanopticMap};
use crate::tensor::{NDArray, Rng};
use crate::tracking::segments;

/// Controlled degradation of ground-truth masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Probability that a thing instance is removed (set to void) in a frame.
    pub dropout: f64,
    /// Thing pixels within this Chebyshev radius of a different label become
    /// void.
    pub erosion: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    pub n_frames: usize,
    /// Thing classes objects are drawn from.
    pub object_classes: Vec<u32>,
    /// Stuff classes of the horizontal background bands, top to bottom.
    pub stuff_classes: Vec<u32>,
    pub void_id: u32,
    pub min_size: usize,
    pub max_size: usize,
    /// Velocities are integers in `[-max_speed, max_speed]` per axis.
    pub max_speed: i32,
    pub texture_seed: u64,
    /// Reject layouts where two objects ever overlap.
    pub non_overlapping: bool,
    /// Keep every object fully inside the frame for the whole sequence.
    pub stay_inside: bool,
    /// Add a fractional part in `[-0.5, 0.5)` to each velocity component.
    /// Positions are rounded to the pixel grid while the flow keeps the
    /// fractional velocity, so warping is no longer exact.
    pub sub_pixel: bool,
    pub corruption: CorruptionSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 64,
            n_objects: 4,
            n_frames: 16,
            object_classes: vec![11, 12, 13],
            stuff_classes: vec![0, 1, 2],
            void_id: 255,
            min_size: 6,
            max_size: 10,
            max_speed: 2,
            texture_seed: 0,
            non_overlapping: false,
            stay_inside: false,
            sub_pixel: false,
            corruption: CorruptionSpec::default(),
        }
    }
}

impl SceneConfig {
    pub fn partition(&self) -> Result<ClassPartition> {
        ClassPartition::new(
            self.object_classes.iter().copied(),
            self.stuff_classes.iter().copied(),
            self.void_id,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.partition()?;
        if self.height == 0 || self.width == 0 || self.n_frames == 0 {
            return Err(Error::Config(
                "scene needs positive size and frame count".into(),
            ));
        }
        if self.stuff_classes.is_empty() || self.stuff_classes.len() > self.height {
            return Err(Error::Config(
                "need between 1 and height stuff bands".into(),
            ));
        }
        if self.n_objects > 0 && self.object_classes.is_empty() {
            return Err(Error::Config(
                "objects requested without thing classes".into(),
            ));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Config(format!(
                "invalid object size range {}..={}",
                self.min_size, self.max_size
            )));
        }
        if self.max_size > self.height || self.max_size > self.width {
            return Err(Error::Config(format!(
                "objects up to {} px do not fit a {}×{} frame",
                self.max_size, self.height, self.width
            )));
        }
        if self.max_speed < 0 {
            return Err(Error::Config("max_speed must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption.dropout) {
            return Err(Error::Config("dropout must be a probability".into()));
        }
        Ok(())
    }
}

/// An axis-aligned textured box with constant velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: u32,
    /// Ground-truth instance id, unique within the video.
    pub id: u32,
    pub height: usize,
    pub width: usize,
    pub y0: i64,
    pub x0: i64,
    pub vy: i64,
    pub vx: i64,
    /// Fractional velocity parts, zero unless the scene is sub-pixel.
    #[serde(default)]
    pub sub_vy: f64,
    #[serde(default)]
    pub sub_vx: f64,
    /// `height × width × 3` colors in object coordinates.
    pub texture: Vec<u8>,
}

impl SceneObject {
    pub fn origin(&self, t: usize) -> (i64, i64) {
        let (vy, vx) = self.velocity();
        (
            self.y0 + (vy * t as f64).round() as i64,
            self.x0 + (vx * t as f64).round() as i64,
        )
    }

    /// `(vy, vx)` in pixels per frame.
    pub fn velocity(&self) -> (f64, f64) {
        (self.vy as f64 + self.sub_vy, self.vx as f64 + self.sub_vx)
    }

    pub fn covers(&self, t: usize, y: i64, x: i64) -> bool {
        let (oy, ox) = self.origin(t);
        y >= oy && x >= ox && y < oy + self.height as i64 && x < ox + self.width as i64
    }

    fn overlaps_at(&self, other: &Self, t: usize) -> bool {
        let (ay, ax) = self.origin(t);
        let (by, bx) = other.origin(t);
        ay < by + other.height as i64
            && by < ay + self.height as i64
            && ax < bx + other.width as i64
            && bx < ax + self.width as i64
    }
}

/// Generated video with exact annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub config: SceneConfig,
    pub seed: u64,
    pub partition: ClassPartition,
    pub objects: Vec<SceneObject>,
    /// `[H, W, 3]` 8-bit RGB frames.
    pub frames: Vec<NDArray<u8>>,
    pub gt_panoptic: Vec<PanopticMap>,
    /// Backward flow into each frame; frame 0 has zero flow.
    pub gt_flow: Vec<FlowField>,
    /// Pixels of frame `t` whose surface point was visible in frame `t - 1`.
    /// All false for frame 0.
    pub visibility: Vec<Vec<bool>>,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame `t` as `[H, W, 3]` floats in `[0, 1]`.
    pub fn frame_f32(&self, t: usize) -> NDArray<f32> {
        self.frames[t].map(|v| v as f32 / 255.0)
    }
}

fn band_of(config: &SceneConfig, y: usize) -> usize {
    y * config.stuff_classes.len() / config.height
}

// Index of the topmost surface at (y, x) in frame t: 0 background, o + 1 object o.
fn surface_at(objects: &[SceneObject], t: usize, y: usize, x: usize) -> usize {
    objects
        .iter()
        .rposition(|o| o.covers(t, y as i64, x as i64))
        .map_or(0, |o| o + 1)
}

fn random_object(config: &SceneConfig, rng: &mut Rng, tex: &mut Rng, id: u32) -> SceneObject {
    let h = rng.int_in(config.min_size as i64, config.max_size as i64) as usize;
    let w = rng.int_in(config.min_size as i64, config.max_size as i64) as usize;
    let s = config.max_speed as i64;
    let (y0, x0, vy, vx) = if config.stay_inside {
        let span = config.n_frames as i64 - 1;
        let mut axis = |room: i64| {
            let v = if span == 0 { s } else { s.min(room / span) };
            let v = rng.int_in(-v, v);
            let start = if v >= 0 { 0 } else { -v * span };
            (rng.int_in(start, start + room - v.abs() * span), v)
        };
        let (y0, vy) = axis((config.height - h) as i64);
        let (x0, vx) = axis((config.width - w) as i64);
        (y0, x0, vy, vx)
    } else {
        let y0 = rng.int_in(0, (config.height - h) as i64);
        let x0 = rng.int_in(0, (config.width - w) as i64);
        (y0, x0, rng.int_in(-s, s), rng.int_in(-s, s))
    };
    let (sub_vy, sub_vx) = if config.sub_pixel {
        let mut sub = |v0: i64, v: i64, room: usize| {
            let f = rng.uniform(-0.5, 0.5);
            let end = v0 + ((v as f64 + f) * (config.n_frames - 1) as f64).round() as i64;
            if config.stay_inside && !(0..=room as i64).contains(&end) {
                0.0
            } else {
                f
            }
        };
        (
            sub(y0, vy, config.height - h),
            sub(x0, vx, config.width - w),
        )
    } else {
        (0.0, 0.0)
    };
    let class_id = config.object_classes[rng.below(config.object_classes.len())];
    let base: Vec<i64> = (0..3).map(|_| tex.int_in(40, 215)).collect();
    let texture = (0..h * w * 3)
        .map(|i| (base[i % 3] + tex.int_in(-40, 40)).clamp(0, 255) as u8)
        .collect();
    SceneObject {
        class_id,
        id,
        height: h,
        width: w,
        y0,
        x0,
        vy,
        vx,
        sub_vy,
        sub_vx,
        texture,
    }
}

/// Deterministic sequence for `config` and `seed`.
pub fn generate_sequence(config: &SceneConfig, seed: u64) -> Result<SyntheticSequence> {
    config.validate()?;
    let mut rng = Rng::fork(seed, 0);
    let mut tex = Rng::fork(seed ^ config.texture_seed.rotate_left(32), 1);

    let mut objects: Vec<SceneObject> = Vec::with_capacity(config.n_objects);
    for k in 0..config.n_objects {
        let mut attempts = 0;
        loop {
            let o = random_object(config, &mut rng, &mut tex, k as u32 + 1);
            let clash = config.non_overlapping
                && objects
                    .iter()
                    .any(|p| (0..config.n_frames).any(|t| p.overlaps_at(&o, t)));
            if !clash {
                objects.push(o);
                break;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(format!(
                    "could not place {} non-overlapping objects",
                    config.n_objects
                )));
            }
        }
    }

    render_sequence(config, seed, objects)
}

/// Renders frames and annotations for explicit objects. Objects may start
/// partly or fully outside the frame.
pub fn render_sequence(
    config: &SceneConfig,
    seed: u64,
    objects: Vec<SceneObject>,
) -> Result<SyntheticSequence> {
    config.validate()?;
    let partition = config.partition()?;
    let (h, w) = (config.height, config.width);
    let mut ids = std::collections::BTreeSet::new();
    for o in &objects {
        if o.texture.len() != o.height * o.width * 3 || !partition.is_thing(o.class_id) || o.id == 0
        {
            return Err(Error::Config(format!("object {} is malformed", o.id)));
        }
        if !ids.insert(o.id) {
            return Err(Error::Config(format!("object id {} used twice", o.id)));
        }
    }
    let mut tex = Rng::fork(seed ^ config.texture_seed.rotate_left(32), 2);
    let mut background = vec![0u8; h * w * 3];
    let bases: Vec<[i64; 3]> = config
        .stuff_classes
        .iter()
        .map(|_| {
            [
                tex.int_in(30, 225),
                tex.int_in(30, 225),
                tex.int_in(30, 225),
            ]
        })
        .collect();
    for y in 0..h {
        let b = bases[band_of(config, y)];
        for x in 0..w {
            for c in 0..3 {
                background[(y * w + x) * 3 + c] = (b[c] + tex.int_in(-25, 25)).clamp(0, 255) as u8;
            }
        }
    }

    let mut frames = Vec::with_capacity(config.n_frames);
    let mut gt_panoptic = Vec::with_capacity(config.n_frames);
    let mut gt_flow = Vec::with_capacity(config.n_frames);
    let mut surfaces: Vec<Vec<usize>> = Vec::with_capacity(config.n_frames);
    for t in 0..config.n_frames {
        let mut img = background.clone();
        let mut pan = PanopticMap::void(h, w, config.void_id);
        let mut flow = FlowField::zeros(h, w);
        let mut surf = vec![0usize; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let s = surface_at(&objects, t, y, x);
                surf[i] = s;
                if s == 0 {
                    pan.classes[i] = config.stuff_classes[band_of(config, y)];
                    continue;
                }
                let o = &objects[s - 1];
                pan.classes[i] = o.class_id;
                pan.instances[i] = o.id;
                let (oy, ox) = o.origin(t);
                let (ly, lx) = ((y as i64 - oy) as usize, (x as i64 - ox) as usize);
                let src = (ly * o.width + lx) * 3;
                img[i * 3..i * 3 + 3].copy_from_slice(&o.texture[src..src + 3]);
                if t > 0 {
                    let (vy, vx) = o.velocity();
                    flow.set(y, x, vx as f32, vy as f32);
                }
            }
        }
        frames.push(NDArray::new(vec![h, w, 3], img)?);
        gt_panoptic.push(pan);
        gt_flow.push(flow);
        surfaces.push(surf);
    }

    let mut visibility = vec![vec![false; h * w]];
    for t in 1..config.n_frames {
        let mut vis = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let s = surfaces[t][i];
                let (vy, vx) = if s == 0 {
                    (0, 0)
                } else {
                    let o = &objects[s - 1];
                    let ((y1, x1), (y0, x0)) = (o.origin(t), o.origin(t - 1));
                    (y1 - y0, x1 - x0)
                };
                let (sy, sx) = (y as i64 - vy, x as i64 - vx);
                if sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 {
                    vis[i] = surfaces[t - 1][sy as usize * w + sx as usize] == s;
                }
            }
        }
        visibility.push(vis);
    }

    Ok(SyntheticSequence {
        config: config.clone(),
        seed,
        partition,
        objects,
        frames,
        gt_panoptic,
        gt_flow,
        visibility,
    })
}

/// Applies `spec` to a map: dropped instances and eroded boundaries become
/// void.
pub fn corrupt(
    map: &PanopticMap,
    spec: &CorruptionSpec,
    partition: &ClassPartition,
    rng: &mut Rng,
) -> PanopticMap {
    let mut out = map.clone();
    let (h, w) = (map.height, map.width);
    for s in segments(map, partition) {
        if spec.dropout > 0.0 && rng.bernoulli(spec.dropout) {
            for &p in &s.pixels {
                out.classes[p as usize] = partition.void_id;
                out.instances[p as usize] = 0;
            }
        }
    }
    if spec.erosion > 0 {
        let r = spec.erosion as i64;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let l = map.label(i);
                if l.1 == 0 || out.classes[i] == partition.void_id {
                    continue;
                }
                let mut edge = false;
                'n: for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        if map.label(ny as usize * w + nx as usize) != l {
                            edge = true;
                            break 'n;
                        }
                    }
                }
                if edge {
                    out.classes[i] = partition.void_id;
                    out.instances[i] = 0;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::warp_labels;

    #[test]
    fn same_seed_same_sequence() {
        let cfg = SceneConfig::default();
        assert_eq!(
            generate_sequence(&cfg, 4).unwrap(),
            generate_sequence(&cfg, 4).unwrap()
        );
        assert_ne!(
            generate_sequence(&cfg, 4).unwrap().frames,
            generate_sequence(&cfg, 5).unwrap().frames
        );
    }

    #[test]
    fn empty_scene_is_static() {
        let cfg = SceneConfig {
            n_objects: 0,
            ..SceneConfig::default()
        };
        let s = generate_sequence(&cfg, 1).unwrap();
        assert!(s.frames.windows(2).all(|f| f[0] == f[1]));
        assert!(s.gt_flow.iter().all(|f| f.max_magnitude() == 0.0));
        assert!(s
            .gt_panoptic
            .iter()
            .all(|m| m.instances.iter().all(|&i| i == 0)));
    }

    #[test]
    fn sub_pixel_flow_is_fractional_and_masks_stay_on_grid() {
        let cfg = SceneConfig {
            sub_pixel: true,
            stay_inside: true,
            ..SceneConfig::default()
        };
        let s = generate_sequence(&cfg, 6).unwrap();
        assert!(s.objects.iter().any(|o| o.sub_vy != 0.0 || o.sub_vx != 0.0));
        for o in &s.objects {
            assert!(o.sub_vy.abs() <= 0.5 && o.sub_vx.abs() <= 0.5);
            for t in 0..cfg.n_frames {
                let (y, x) = o.origin(t);
                assert!(y >= 0 && x >= 0);
                assert!(y as usize + o.height <= cfg.height && x as usize + o.width <= cfg.width);
            }
        }
        let o = &s.objects[s.objects.len() - 1];
        let (vy, vx) = o.velocity();
        let (y, x) = o.origin(1);
        assert_eq!(
            s.gt_flow[1].at(y as usize, x as usize),
            (vx as f32, vy as f32)
        );
        assert_eq!(generate_sequence(&cfg, 6).unwrap(), s);
        let plain = generate_sequence(
            &SceneConfig {
                stay_inside: true,
                ..SceneConfig::default()
            },
            6,
        )
        .unwrap();
        assert!(plain
            .objects
            .iter()
            .all(|o| o.sub_vy == 0.0 && o.sub_vx == 0.0));
    }

    pub(crate) fn flat_box(
        class_id: u32,
        id: u32,
        size: usize,
        y0: i64,
        x0: i64,
        vy: i64,
        vx: i64,
    ) -> SceneObject {
        SceneObject {
            class_id,
            id,
            height: size,
            width: size,
            y0,
            x0,
            vy,
            vx,
            sub_vy: 0.0,
            sub_vx: 0.0,
            texture: (0..size * size * 3).map(|i| (i * 37 % 251) as u8).collect(),
        }
    }

    #[test]
    fn moving_box_warps_exactly_except_disocclusion() {
        let cfg = SceneConfig {
            height: 16,
            width: 40,
            n_frames: 16,
            ..SceneConfig::default()
        };
        let s = render_sequence(&cfg, 2, vec![flat_box(11, 1, 8, 4, 0, 0, 1)]).unwrap();
        for t in 1..16 {
            assert_eq!(s.gt_panoptic[t].segment_areas(255)[&(11, 1)], 64);
            let warped = warp_labels(&s.gt_panoptic[t - 1], &s.gt_flow[t], 255).unwrap();
            for i in 0..16 * 40 {
                let disoccluded = (4..12).contains(&(i / 40)) && i % 40 == t - 1;
                assert_eq!(s.visibility[t][i], !disoccluded);
                if !disoccluded {
                    assert_eq!(warped.label(i), s.gt_panoptic[t].label(i));
                }
            }
        }
    }

    #[test]
    fn stay_inside_keeps_full_area() {
        let cfg = SceneConfig {
            stay_inside: true,
            max_speed: 3,
            ..SceneConfig::default()
        };
        for seed in 0..10 {
            let s = generate_sequence(&cfg, seed).unwrap();
            for o in &s.objects {
                for t in 0..cfg.n_frames {
                    let (y, x) = o.origin(t);
                    assert!(y >= 0 && x >= 0);
                    assert!(
                        y as usize + o.height <= cfg.height && x as usize + o.width <= cfg.width
                    );
                }
            }
        }
    }

    #[test]
    fn render_rejects_duplicate_ids() {
        let cfg = SceneConfig::default();
        let objs = vec![
            flat_box(11, 1, 4, 0, 0, 0, 0),
            flat_box(12, 1, 4, 9, 9, 0, 0),
        ];
        assert!(render_sequence(&cfg, 0, objs).is_err());
    }

    #[test]
    fn warp_consistency_on_visible_pixels() {
        let cfg = SceneConfig {
            n_objects: 6,
            max_speed: 3,
            ..SceneConfig::default()
        };
        for seed in 0..10 {
            let s = generate_sequence(&cfg, seed).unwrap();
            for t in 1..s.len() {
                let warped = warp_labels(&s.gt_panoptic[t - 1], &s.gt_flow[t], 255).unwrap();
                for (i, &v) in s.visibility[t].iter().enumerate() {
                    if v {
                        assert_eq!(warped.label(i), s.gt_panoptic[t].label(i));
                    }
                }
            }
        }
    }

    #[test]
    fn visibility_matches_z_order_oracle() {
        let cfg = SceneConfig {
            n_objects: 6,
            max_speed: 3,
            min_size: 8,
            max_size: 14,
            ..SceneConfig::default()
        };
        let s = generate_sequence(&cfg, 7).unwrap();
        let (h, w) = (cfg.height, cfg.width);
        let mut occluded_somewhere = false;
        for t in 1..s.len() {
            for y in 0..h {
                for x in 0..w {
                    // topmost object at t, scanning from the last drawn
                    let top_now = s
                        .objects
                        .iter()
                        .rev()
                        .find(|o| o.covers(t, y as i64, x as i64));
                    let want = match top_now {
                        None => !s
                            .objects
                            .iter()
                            .any(|o| o.covers(t - 1, y as i64, x as i64)),
                        Some(o) => {
                            let (py, px) = (y as i64 - o.vy, x as i64 - o.vx);
                            let inside = py >= 0 && px >= 0 && py < h as i64 && px < w as i64;
                            let top_then = s.objects.iter().rev().find(|q| q.covers(t - 1, py, px));
                            inside && top_then.is_some_and(|q| q.id == o.id)
                        }
                    };
                    if !want && top_now.is_some() {
                        occluded_somewhere = true;
                    }
                    assert_eq!(s.visibility[t][y * w + x], want, "t {t} ({y}, {x})");
                }
            }
        }
        assert!(occluded_somewhere);
    }

    #[test]
    fn ids_unique_and_non_overlap_honored() {
        let cfg = SceneConfig {
            n_objects: 5,
            non_overlapping: true,
            max_speed: 1,
            ..SceneConfig::default()
        };
        let s = generate_sequence(&cfg, 3).unwrap();
        let ids: std::collections::BTreeSet<u32> = s.objects.iter().map(|o| o.id).collect();
        assert_eq!(ids.len(), 5);
        for t in 0..s.len() {
            for (a, o) in s.objects.iter().enumerate() {
                for p in &s.objects[a + 1..] {
                    assert!(!o.overlaps_at(p, t));
                }
            }
        }
    }

    #[test]
    fn oversized_objects_rejected() {
        let cfg = SceneConfig {
            height: 8,
            max_size: 10,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_sequence(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn corruption_drops_and_erodes() {
        let cfg = SceneConfig {
            n_objects: 3,
            non_overlapping: true,
            ..SceneConfig::default()
        };
        let s = generate_sequence(&cfg, 9).unwrap();
        let p = &s.partition;
        let gt = &s.gt_panoptic[0];
        let all = corrupt(
            gt,
            &CorruptionSpec {
                dropout: 1.0,
                erosion: 0,
            },
            p,
            &mut Rng::new(0),
        );
        assert!(all.instances.iter().all(|&i| i == 0));
        let eroded = corrupt(
            gt,
            &CorruptionSpec {
                dropout: 0.0,
                erosion: 1,
            },
            p,
            &mut Rng::new(0),
        );
        let area = |m: &PanopticMap| m.instances.iter().filter(|&&i| i > 0).count();
        assert!(area(&eroded) < area(gt));
        assert_eq!(
            corrupt(gt, &CorruptionSpec::default(), p, &mut Rng::new(0)),
            *gt
        );
    }
}
