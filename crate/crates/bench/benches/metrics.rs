use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use vpst::metrics::{pq, vpq_k};
use vpst::synth::{corrupt, generate_sequence, CorruptionSpec, SceneConfig};
use vpst::tracking::{fresh_ids, TrackState, Tracker, DEFAULT_IOU_THRESHOLD};
use vpst::Rng;

fn metrics(c: &mut Criterion) {
    let seq = generate_sequence(&SceneConfig::default(), 3).unwrap();
    let spec = CorruptionSpec {
        dropout: 0.2,
        erosion: 1,
    };
    let mut rng = Rng::new(1);
    let preds: Vec<_> = seq
        .gt_panoptic
        .iter()
        .map(|g| corrupt(g, &spec, &seq.partition, &mut rng))
        .collect();
    c.bench_function("pq_32x64", |b| {
        b.iter(|| {
            pq(
                black_box(&preds[0]),
                black_box(&seq.gt_panoptic[0]),
                &seq.partition,
            )
            .unwrap()
        })
    });
    for k in [1usize, 5, 15] {
        c.bench_function(&format!("vpq_k{k}_16_frames"), |b| {
            b.iter(|| {
                vpq_k(
                    black_box(&preds),
                    black_box(&seq.gt_panoptic),
                    k,
                    &seq.partition,
                )
                .unwrap()
            })
        });
    }

    let mut state = TrackState::default();
    let fresh: Vec<_> = seq
        .gt_panoptic
        .iter()
        .map(|g| fresh_ids(g, &seq.partition, &mut state).unwrap())
        .collect();
    c.bench_function("tracker_16_frames_gt_flow", |b| {
        b.iter(|| {
            let mut tracker = Tracker::new(seq.partition.clone(), DEFAULT_IOU_THRESHOLD);
            for (t, m) in fresh.iter().enumerate() {
                let flow = (t > 0).then(|| &seq.gt_flow[t]);
                black_box(tracker.step(m, flow).unwrap());
            }
        })
    });
}

criterion_group!(benches, metrics);
criterion_main!(benches);
