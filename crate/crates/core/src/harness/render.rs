//! Panoptic overlays for visual inspection.

use crate::error::{Error, Result};
use crate::panoptic::{ClassPartition, PanopticMap};
use crate::tensor::NDArray;
use crate::tracking::segments;

/// 256 distinct colors built by spreading the bits of the index over the
/// three channels, high bits first.
pub fn palette() -> [[u8; 3]; 256] {
    let mut out = [[0u8; 3]; 256];
    for (i, c) in out.iter_mut().enumerate() {
        let mut v = i;
        let mut shift = 7;
        while v > 0 {
            for ch in c.iter_mut() {
                *ch |= ((v & 1) as u8) << shift;
                v >>= 1;
            }
            shift -= 1;
        }
    }
    out
}

/// Palette index of a segment. Injective in `id` for a fixed class over any
/// 256 consecutive ids.
pub fn color_index(class_id: u32, id: u32) -> usize {
    (class_id.wrapping_mul(97).wrapping_add(id) % 256) as usize
}

/// Blends segment colors into `frame` with alpha 0.5 and marks each thing
/// centroid with a 3×3 cross in the unblended color. Void pixels keep the
/// frame color.
pub fn render_overlay(
    frame: &NDArray<u8>,
    map: &PanopticMap,
    partition: &ClassPartition,
) -> Result<NDArray<u8>> {
    let (h, w) = (map.height, map.width);
    if frame.dims() != [h, w, 3] {
        return Err(Error::shape("render_overlay", frame.dims(), &[h, w, 3]));
    }
    let pal = palette();
    let mut out = frame.clone();
    let px = out.data_mut();
    for i in 0..h * w {
        let (c, id) = map.label(i);
        if c == partition.void_id {
            continue;
        }
        let col = pal[color_index(c, id)];
        for k in 0..3 {
            px[3 * i + k] = (px[3 * i + k] as u16 + col[k] as u16).div_ceil(2) as u8;
        }
    }
    for seg in segments(map, partition) {
        let n = seg.area();
        let cy = seg.pixels.iter().map(|&p| p as usize / w).sum::<usize>() as f64 / n as f64;
        let cx = seg.pixels.iter().map(|&p| p as usize % w).sum::<usize>() as f64 / n as f64;
        let (cy, cx) = (cy.round() as i64, cx.round() as i64);
        let col = pal[color_index(seg.class_id, seg.instance_id)];
        for (dy, dx) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (y, x) = (cy + dy, cx + dx);
            if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
                let i = y as usize * w + x as usize;
                px[3 * i..3 * i + 3].copy_from_slice(&col);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn partition() -> ClassPartition {
        ClassPartition::new([11, 12], [0], 255).unwrap()
    }

    fn frame(h: usize, w: usize) -> NDArray<u8> {
        NDArray::new(
            vec![h, w, 3],
            (0..h * w * 3).map(|i| (i * 7 % 256) as u8).collect(),
        )
        .unwrap()
    }

    #[test]
    fn palette_is_distinct() {
        let p = palette();
        assert_eq!(p.iter().collect::<HashSet<_>>().len(), 256);
    }

    #[test]
    fn consecutive_ids_get_distinct_colors() {
        for class in [0, 11, 12, 200] {
            let colors: HashSet<_> = (1..=256)
                .map(|id| palette()[color_index(class, id)])
                .collect();
            assert_eq!(colors.len(), 256);
        }
    }

    #[test]
    fn void_map_leaves_frame_untouched() {
        let f = frame(5, 6);
        let map = PanopticMap::void(5, 6, 255);
        assert_eq!(render_overlay(&f, &map, &partition()).unwrap(), f);
    }

    #[test]
    fn same_id_same_color_across_frames() {
        let p = partition();
        let mut a = PanopticMap::void(6, 6, 255);
        let mut b = PanopticMap::void(6, 6, 255);
        for i in [7, 8, 13, 14] {
            a.classes[i] = 11;
            a.instances[i] = 4;
        }
        for i in [21, 22, 27, 28] {
            b.classes[i] = 11;
            b.instances[i] = 4;
        }
        let black = NDArray::filled(&[6, 6, 3], 0u8);
        let ra = render_overlay(&black, &a, &p).unwrap();
        let rb = render_overlay(&black, &b, &p).unwrap();
        // pixel 7 and 21 are off-centroid corners of each 2×2 block
        assert_eq!(ra.data()[3 * 7..3 * 7 + 3], rb.data()[3 * 21..3 * 21 + 3]);
        let col = palette()[color_index(11, 4)];
        let blended: Vec<u8> = col.iter().map(|&c| (c as u16).div_ceil(2) as u8).collect();
        assert_eq!(ra.data()[3 * 7..3 * 7 + 3], blended[..]);
    }

    #[test]
    fn centroid_marker_uses_full_color() {
        let p = partition();
        let mut m = PanopticMap::void(7, 7, 255);
        for y in 1..6 {
            for x in 1..6 {
                m.classes[y * 7 + x] = 12;
                m.instances[y * 7 + x] = 2;
            }
        }
        let r = render_overlay(&NDArray::filled(&[7, 7, 3], 0u8), &m, &p).unwrap();
        let c = 3 * (3 * 7 + 3);
        assert_eq!(r.data()[c..c + 3], palette()[color_index(12, 2)]);
    }
}
