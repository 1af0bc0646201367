use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use vpst::flow::block_match_flow;
use vpst::harness::{run_pipeline, FlowSource, PipelineConfig, PredictionSource};
use vpst::synth::{generate_sequence, SceneConfig};
use vpst::AttentionVariant;

fn pipeline(c: &mut Criterion) {
    let seq = generate_sequence(
        &SceneConfig {
            n_frames: 8,
            ..SceneConfig::default()
        },
        0,
    )
    .unwrap();
    let mut group = c.benchmark_group("pipeline_8_frames_32x64");
    group.sample_size(10);
    for (variant, memory) in [
        (AttentionVariant::Space, 0),
        (AttentionVariant::GlobalTimeSpace, 2),
        (AttentionVariant::LocalTimeSpace, 2),
    ] {
        let cfg = PipelineConfig {
            variant,
            memory,
            windows: vec![1, 5],
            ..PipelineConfig::default()
        };
        group.bench_function(variant.name(), |b| {
            b.iter(|| run_pipeline(black_box(&seq), &cfg).unwrap())
        });
    }
    let cfg = PipelineConfig {
        prediction: PredictionSource::GtInject,
        flow_source: FlowSource::BlockMatch,
        ..PipelineConfig::default()
    };
    group.bench_function("gt_inject_block_match", |b| {
        b.iter(|| run_pipeline(black_box(&seq), &cfg).unwrap())
    });
    group.finish();

    c.bench_function("block_match_32x64_p7_s3", |b| {
        b.iter(|| {
            block_match_flow(black_box(&seq.frames[0]), black_box(&seq.frames[1]), 7, 3).unwrap()
        })
    });
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
