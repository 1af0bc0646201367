//! Panoptic Quality and Video Panoptic Quality.
//!
//! Both metrics share one routine: segments keyed by `(class, id)` are
//! collected over a window of frames (pixel sets concatenated across frames),
//! matched within class at IoU above 0.5, and summarized as per-class
//! `iou_sum / (tp + fp/2 + fn/2)`. PQ is the one-frame window; `VPQ_k`
//! averages the class-averaged value over all windows of `k` frames.
//!
//! Void handling follows the usual protocol: ground-truth void pixels are
//! removed from the union of a pair, and an unmatched prediction that is more
//! than half void in the ground truth is not a false positive.
//!
//! All reported qualities are percentages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{ClassPartition, PanopticMap};

/// The window sizes reported by default.
pub const DEFAULT_WINDOWS: [usize; 4] = [1, 5, 10, 15];

type Label = (u32, u32);

/// Raw matching statistics of one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassStats {
    fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// `(PQ, SQ, RQ)` as fractions; `None` for a class with no segments.
    pub fn quality(&self) -> Option<(f64, f64, f64)> {
        if self.is_empty() {
            return None;
        }
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        let sq = if self.tp > 0 {
            self.iou_sum / self.tp as f64
        } else {
            0.0
        };
        let rq = self.tp as f64 / denom;
        Some((self.iou_sum / denom, sq, rq))
    }
}

/// Per-class statistics of one window (or an accumulation of windows).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub per_class: BTreeMap<u32, ClassStats>,
}

/// Class-averaged quality of one window, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub all: f64,
    pub things: Option<f64>,
    pub stuff: Option<f64>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl PqStats {
    pub fn add(&mut self, other: &PqStats) {
        for (&c, s) in &other.per_class {
            let e = self.per_class.entry(c).or_default();
            e.iou_sum += s.iou_sum;
            e.tp += s.tp;
            e.fp += s.fp;
            e.fn_ += s.fn_;
        }
    }

    /// Class-averaged PQ over classes with at least one segment. A window
    /// without any segment scores 0.
    pub fn quality(&self, partition: &ClassPartition) -> Quality {
        let pq = |keep: &dyn Fn(u32) -> bool| {
            mean(
                self.per_class
                    .iter()
                    .filter(|(&c, _)| keep(c))
                    .filter_map(|(_, s)| s.quality().map(|q| 100.0 * q.0)),
            )
        };
        Quality {
            all: pq(&|_| true).unwrap_or(0.0),
            things: pq(&|c| partition.is_thing(c)),
            stuff: pq(&|c| partition.is_stuff(c)),
        }
    }
}

/// Matching parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    /// Strict IoU threshold for a true positive; at least 0.5 so matches are
    /// unique.
    pub iou_threshold: f64,
    /// Fraction of ground-truth void above which an unmatched prediction is
    /// ignored.
    pub void_fraction: f64,
    /// Distance between consecutive window starts.
    pub stride: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            void_fraction: 0.5,
            stride: 1,
        }
    }
}

fn check_pair(pred: &PanopticMap, gt: &PanopticMap) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape(
            "panoptic_quality",
            &[pred.height, pred.width],
            &[gt.height, gt.width],
        ));
    }
    Ok(())
}

/// Matching statistics of a window of aligned frames.
pub fn window_stats(
    preds: &[PanopticMap],
    gts: &[PanopticMap],
    partition: &ClassPartition,
    params: &MatchParams,
) -> Result<PqStats> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Invalid(format!(
            "window needs equally many non-zero frames, got {} predictions and {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if params.iou_threshold < 0.5 {
        return Err(Error::Config(
            "IoU threshold below 0.5 makes matches ambiguous".into(),
        ));
    }
    let void = partition.void_id;
    let norm = |(c, i): Label| if c == void { (void, 0) } else { (c, i) };
    let mut gt_area: BTreeMap<Label, usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<Label, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(Label, Label), usize> = BTreeMap::new();
    for (p, g) in preds.iter().zip(gts) {
        check_pair(p, g)?;
        for i in 0..g.len() {
            let gl = norm(g.label(i));
            let pl = norm(p.label(i));
            if gl.0 != void {
                *gt_area.entry(gl).or_insert(0) += 1;
            }
            if pl.0 != void {
                *pred_area.entry(pl).or_insert(0) += 1;
            }
            *inter.entry((gl, pl)).or_insert(0) += 1;
        }
    }
    let void_in_pred = |pl: Label| inter.get(&((void, 0), pl)).copied().unwrap_or(0);

    let mut stats = PqStats::default();
    let mut gt_matched = BTreeSet::new();
    let mut pred_matched = BTreeSet::new();
    // ordered by ground-truth label, so iou sums accumulate in a fixed order
    for (&(gl, pl), &n) in &inter {
        if gl.0 == void || gl.0 != pl.0 {
            continue;
        }
        let union = pred_area[&pl] + gt_area[&gl] - n - void_in_pred(pl);
        let iou = n as f64 / union as f64;
        if iou > params.iou_threshold {
            let s = stats.per_class.entry(gl.0).or_default();
            s.tp += 1;
            s.iou_sum += iou;
            gt_matched.insert(gl);
            pred_matched.insert(pl);
        }
    }
    for gl in gt_area.keys() {
        if !gt_matched.contains(gl) {
            stats.per_class.entry(gl.0).or_default().fn_ += 1;
        }
    }
    for (&pl, &area) in &pred_area {
        if pred_matched.contains(&pl) {
            continue;
        }
        if void_in_pred(pl) as f64 / area as f64 > params.void_fraction {
            continue;
        }
        stats.per_class.entry(pl.0).or_default().fp += 1;
    }
    stats.per_class.retain(|_, s| !s.is_empty());
    Ok(stats)
}

/// Per-class line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    #[serde(flatten)]
    pub stats: ClassStats,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// PQ of one frame pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub per_class: BTreeMap<u32, ClassReport>,
    pub pq: f64,
    pub pq_th: Option<f64>,
    pub pq_st: Option<f64>,
}

fn class_reports(stats: &PqStats) -> BTreeMap<u32, ClassReport> {
    stats
        .per_class
        .iter()
        .filter_map(|(&c, s)| {
            s.quality().map(|(pq, sq, rq)| {
                (
                    c,
                    ClassReport {
                        stats: *s,
                        pq: 100.0 * pq,
                        sq: 100.0 * sq,
                        rq: 100.0 * rq,
                    },
                )
            })
        })
        .collect()
}

/// Panoptic Quality of a single prediction.
pub fn pq(pred: &PanopticMap, gt: &PanopticMap, partition: &ClassPartition) -> Result<PqReport> {
    let stats = window_stats(
        std::slice::from_ref(pred),
        std::slice::from_ref(gt),
        partition,
        &MatchParams::default(),
    )?;
    let q = stats.quality(partition);
    Ok(PqReport {
        per_class: class_reports(&stats),
        pq: q.all,
        pq_th: q.things,
        pq_st: q.stuff,
    })
}

/// Average of per-frame PQ over a sequence.
pub fn frame_averaged_pq(
    preds: &[PanopticMap],
    gts: &[PanopticMap],
    partition: &ClassPartition,
) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Invalid(
            "sequences must be aligned and non-empty".into(),
        ));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += pq(p, g, partition)?.pq;
    }
    Ok(total / preds.len() as f64)
}

/// `VPQ_k` with its thing and stuff variants, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpqResult {
    pub k: usize,
    pub vpq: f64,
    pub vpq_th: Option<f64>,
    pub vpq_st: Option<f64>,
    pub windows: usize,
    /// Statistics summed over all windows.
    pub stats: PqStats,
}

/// Window starts for a sequence of `len` frames.
pub fn window_starts(len: usize, k: usize, stride: usize) -> Vec<usize> {
    if k == 0 || k > len || stride == 0 {
        return Vec::new();
    }
    (0..=len - k).step_by(stride).collect()
}

pub fn vpq_k_with(
    preds: &[PanopticMap],
    gts: &[PanopticMap],
    k: usize,
    partition: &ClassPartition,
    params: &MatchParams,
) -> Result<VpqResult> {
    if preds.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    if k == 0 || k > preds.len() {
        return Err(Error::Invalid(format!(
            "window size {k} invalid for {} frames",
            preds.len()
        )));
    }
    if params.stride == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    let mut values = Vec::new();
    let mut things = Vec::new();
    let mut stuff = Vec::new();
    let mut total = PqStats::default();
    let starts = window_starts(preds.len(), k, params.stride);
    for &t in &starts {
        let s = window_stats(&preds[t..t + k], &gts[t..t + k], partition, params)?;
        let q = s.quality(partition);
        values.push(q.all);
        things.extend(q.things);
        stuff.extend(q.stuff);
        total.add(&s);
    }
    Ok(VpqResult {
        k,
        vpq: mean(values.iter().copied()).unwrap_or(0.0),
        vpq_th: mean(things),
        vpq_st: mean(stuff),
        windows: starts.len(),
        stats: total,
    })
}

/// `VPQ_k` with default matching (threshold 0.5, stride 1).
pub fn vpq_k(
    preds: &[PanopticMap],
    gts: &[PanopticMap],
    k: usize,
    partition: &ClassPartition,
) -> Result<VpqResult> {
    vpq_k_with(preds, gts, k, partition, &MatchParams::default())
}

/// Full evaluation of a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Frame-averaged PQ.
    pub pq: f64,
    pub pq_th: Option<f64>,
    pub pq_st: Option<f64>,
    /// Per-class statistics accumulated over all frames.
    pub per_class: BTreeMap<u32, ClassReport>,
    pub per_k: Vec<VpqResult>,
    /// Mean of `VPQ_k` over the evaluated window sizes.
    pub vpq: f64,
    pub vpq_th: Option<f64>,
    pub vpq_st: Option<f64>,
}

/// PQ breakdown plus `VPQ_k` for every `k` in `ks` and their mean.
pub fn vpq_average(
    preds: &[PanopticMap],
    gts: &[PanopticMap],
    ks: &[usize],
    partition: &ClassPartition,
    params: &MatchParams,
) -> Result<MetricReport> {
    if ks.is_empty() {
        return Err(Error::Config("no window sizes given".into()));
    }
    let per_k = ks
        .iter()
        .map(|&k| vpq_k_with(preds, gts, k, partition, params))
        .collect::<Result<Vec<_>>>()?;
    let mut frames = PqStats::default();
    let (mut pq_sum, mut th, mut st) = (0.0, Vec::new(), Vec::new());
    for (p, g) in preds.iter().zip(gts) {
        let s = window_stats(
            std::slice::from_ref(p),
            std::slice::from_ref(g),
            partition,
            params,
        )?;
        let q = s.quality(partition);
        pq_sum += q.all;
        th.extend(q.things);
        st.extend(q.stuff);
        frames.add(&s);
    }
    Ok(MetricReport {
        pq: pq_sum / preds.len() as f64,
        pq_th: mean(th),
        pq_st: mean(st),
        per_class: class_reports(&frames),
        vpq: mean(per_k.iter().map(|r| r.vpq)).unwrap_or(0.0),
        vpq_th: mean(per_k.iter().filter_map(|r| r.vpq_th)),
        vpq_st: mean(per_k.iter().filter_map(|r| r.vpq_st)),
        per_k,
    })
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub report: MetricReport,
    /// Mean per-frame inference time.
    pub time_ms: Option<f64>,
}

/// CSV with one row per configuration and columns `k1, k5, ...`, `VPQ`,
/// `time_ms`. All rows must share the same window sizes.
pub fn table_csv(rows: &[TableRow]) -> Result<String> {
    let ks: Vec<usize> = rows
        .first()
        .map(|r| r.report.per_k.iter().map(|v| v.k).collect())
        .unwrap_or_default();
    let mut out = String::from("config");
    for k in &ks {
        write!(out, ",k{k}").unwrap();
    }
    out.push_str(",VPQ,VPQ_th,VPQ_st,time_ms\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
    for r in rows {
        let row_ks: Vec<usize> = r.report.per_k.iter().map(|v| v.k).collect();
        if row_ks != ks {
            return Err(Error::Invalid(format!(
                "row {} has windows {row_ks:?}, expected {ks:?}",
                r.name
            )));
        }
        out.push_str(&r.name.replace(',', ";"));
        for v in &r.report.per_k {
            write!(out, ",{:.2}", v.vpq).unwrap();
        }
        writeln!(
            out,
            ",{:.2},{},{},{}",
            r.report.vpq,
            opt(r.report.vpq_th),
            opt(r.report.vpq_st),
            r.time_ms.map(|t| format!("{t:.3}")).unwrap_or_default()
        )
        .unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn partition() -> ClassPartition {
        ClassPartition::new([1, 2], [0, 3], 255).unwrap()
    }

    fn map(w: usize, cells: &[(u32, u32)]) -> PanopticMap {
        let h = cells.len() / w;
        PanopticMap::new(
            h,
            w,
            cells.iter().map(|c| c.0).collect(),
            cells.iter().map(|c| c.1).collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_prediction_scores_100() {
        let gt = map(3, &[(0, 0), (1, 1), (1, 1), (3, 0), (2, 4), (255, 0)]);
        let r = pq(&gt, &gt, &partition()).unwrap();
        assert_eq!((r.pq, r.pq_th, r.pq_st), (100.0, Some(100.0), Some(100.0)));
        for c in r.per_class.values() {
            assert_eq!((c.sq, c.rq), (100.0, 100.0));
        }
    }

    #[test]
    fn missing_prediction_is_false_negative() {
        let gt = map(2, &[(1, 1), (1, 1)]);
        let pred = map(2, &[(255, 0), (255, 0)]);
        let r = pq(&pred, &gt, &partition()).unwrap();
        assert_eq!(r.pq, 0.0);
        assert_eq!(r.per_class[&1].stats.fn_, 1);
        assert_eq!(r.pq_st, None);
    }

    #[test]
    fn void_pixels_leave_union_and_mostly_void_preds_are_ignored() {
        // gt: 3 px of instance, 3 px void; pred covers the instance and 2 void px
        let gt = map(6, &[(1, 1), (1, 1), (1, 1), (255, 0), (255, 0), (255, 0)]);
        let pred = map(6, &[(1, 7), (1, 7), (1, 7), (1, 7), (1, 7), (2, 9)]);
        let r = pq(&pred, &gt, &partition()).unwrap();
        assert_eq!(
            r.per_class[&1].stats,
            ClassStats {
                iou_sum: 1.0,
                tp: 1,
                fp: 0,
                fn_: 0
            }
        );
        assert!(!r.per_class.contains_key(&2));
    }

    #[test]
    fn pq_is_sq_times_rq() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let (gt, pred) = random_pair(&mut rng, 8);
            let r = pq(&pred, &gt, &partition()).unwrap();
            for c in r.per_class.values() {
                if c.stats.tp > 0 {
                    assert!((c.pq - c.sq * c.rq / 100.0).abs() < 1e-9);
                }
            }
        }
    }

    fn random_pair(rng: &mut Rng, n: usize) -> (PanopticMap, PanopticMap) {
        let labels = [(0, 0), (3, 0), (1, 1), (1, 2), (2, 3), (255, 0)];
        let mut gt = PanopticMap::void(n, n, 255);
        for i in 0..n * n {
            let (c, id) = labels[(i / n / 3 + i % n / 3) % labels.len()];
            gt.classes[i] = c;
            gt.instances[i] = id;
        }
        let mut pred = gt.clone();
        for i in 0..n * n {
            if rng.bernoulli(0.3) {
                let (c, id) = labels[rng.below(labels.len())];
                pred.classes[i] = c;
                pred.instances[i] = id;
            }
        }
        (gt, pred)
    }

    #[test]
    fn swapping_roles_swaps_fp_and_fn() {
        let mut rng = Rng::new(5);
        let p = ClassPartition::new([1, 2], [0, 3], 254).unwrap();
        for _ in 0..30 {
            let (a, b) = random_pair(&mut rng, 9);
            let ab = window_stats(
                std::slice::from_ref(&a),
                std::slice::from_ref(&b),
                &p,
                &MatchParams::default(),
            )
            .unwrap();
            let ba = window_stats(&[b], &[a], &p, &MatchParams::default()).unwrap();
            for (c, s) in &ab.per_class {
                let t = ba.per_class[c];
                assert_eq!((s.tp, s.fp, s.fn_), (t.tp, t.fn_, t.fp));
                assert_eq!(s.iou_sum, t.iou_sum);
            }
        }
    }

    #[test]
    fn vpq_1_equals_frame_average() {
        let mut rng = Rng::new(2);
        let (gts, preds): (Vec<_>, Vec<_>) = (0..6).map(|_| random_pair(&mut rng, 10)).unzip();
        let v = vpq_k(&preds, &gts, 1, &partition()).unwrap();
        assert_eq!(
            v.vpq,
            frame_averaged_pq(&preds, &gts, &partition()).unwrap()
        );
        assert_eq!(v.windows, 6);
    }

    #[test]
    fn reshuffled_ids_drop_with_window() {
        // perfect masks, instance id alternates between frames
        let frames = 6;
        let gts: Vec<_> = (0..frames)
            .map(|_| map(4, &[(0, 0), (1, 1), (1, 1), (0, 0)]))
            .collect();
        let preds: Vec<_> = (0..frames)
            .map(|t| {
                map(
                    4,
                    &[
                        (0, 0),
                        (1, 1 + (t as u32 % 2)),
                        (1, 1 + (t as u32 % 2)),
                        (0, 0),
                    ],
                )
            })
            .collect();
        let p = partition();
        assert_eq!(vpq_k(&preds, &gts, 1, &p).unwrap().vpq, 100.0);
        let v2 = vpq_k(&preds, &gts, 2, &p).unwrap();
        // each 2-frame window: gt tube of 4 px vs two 2 px pred tubes, IoU 0.5 → no match
        assert_eq!(v2.vpq_th, Some(0.0));
        assert_eq!(v2.vpq_st, Some(100.0));
        let v3 = vpq_k(&preds, &gts, 3, &p).unwrap();
        // 4 of 6 px in the best tube: IoU 2/3 matched, one 2 px false positive
        let want = 100.0 * (2.0 / 3.0) / 1.5;
        assert!((v3.vpq_th.unwrap() - want).abs() < 1e-12);
        assert!(vpq_k(&preds, &gts, 7, &p).is_err());
    }

    #[test]
    fn average_over_windows_and_csv() {
        let gts: Vec<_> = (0..5).map(|_| map(2, &[(0, 0), (1, 4)])).collect();
        let r = vpq_average(
            &gts,
            &gts,
            &[1, 2, 5],
            &partition(),
            &MatchParams::default(),
        )
        .unwrap();
        assert_eq!(r.vpq, 100.0);
        assert_eq!(
            r.per_k.iter().map(|v| v.windows).collect::<Vec<_>>(),
            vec![5, 4, 1]
        );
        let csv = table_csv(&[TableRow {
            name: "perfect".into(),
            report: r,
            time_ms: Some(1.5),
        }])
        .unwrap();
        assert_eq!(csv, "config,k1,k2,k5,VPQ,VPQ_th,VPQ_st,time_ms\nperfect,100.00,100.00,100.00,100.00,100.00,100.00,1.500\n");
    }

    #[test]
    fn stride_controls_window_starts() {
        assert_eq!(window_starts(10, 5, 1), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(window_starts(10, 5, 5), vec![0, 5]);
        assert!(window_starts(3, 5, 1).is_empty());
    }
}
