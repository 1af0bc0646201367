//! Timing of the attention stages per variant and memory length.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NDArray, Rng};
use crate::transformer::{
    comparison_count, AttentionVariant, StreamingVideoModule, VideoModule, VideoModuleConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub frames: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    /// Also time the spatial self-attention stage.
    pub spatial: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            dim: 64,
            heads: 1,
            frames: vec![1, 2, 4],
            reps: 20,
            warmup: 5,
            spatial: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: AttentionVariant,
    pub frames: usize,
    /// Median spatial stage time, when measured.
    pub spatial_ms: Option<f64>,
    /// Median time stage, absent for the space variant.
    pub temporal_ms: Option<f64>,
    /// Key comparisons per query token.
    pub comparisons: usize,
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_median(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(samples))
}

pub fn bench_attention(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.reps < 20 || cfg.warmup < 5 {
        return Err(Error::Config(
            "timing needs at least 20 reps after 5 warm-ups".into(),
        ));
    }
    if cfg.frames.contains(&0) {
        return Err(Error::Config("memory lengths must be positive".into()));
    }
    let mut rows = Vec::new();
    for variant in AttentionVariant::ALL {
        for &t in &cfg.frames {
            let mc = VideoModuleConfig {
                channels: cfg.dim,
                dim: cfg.dim,
                memory: if variant.uses_memory() { t } else { 0 },
                heads: cfg.heads,
                variant,
                height: cfg.height,
                width: cfg.width,
            };
            let module = VideoModule::<f32>::new(mc, cfg.seed)?;
            let mut rng = Rng::fork(cfg.seed, 5);
            let dims = [1, cfg.height, cfg.width, cfg.dim];
            let x = module.reduce(&rng.normal_array(&dims, 0.0, 1.0))?;
            let spatial_ms = if cfg.spatial {
                Some(time_median(cfg.warmup, cfg.reps, || {
                    module.spatial_stage(&x).map(drop)
                })?)
            } else {
                None
            };
            let temporal_ms = if variant.uses_memory() {
                let mut stream = StreamingVideoModule::new(module.clone())?;
                for _ in 0..t {
                    let m: NDArray<f32> = rng.normal_array(&dims, 0.0, 1.0);
                    stream.push_memory(&m)?;
                }
                Some(time_median(cfg.warmup, cfg.reps, || {
                    stream.temporal_only(&x).map(drop)
                })?)
            } else {
                None
            };
            rows.push(BenchRow {
                variant,
                frames: t,
                spatial_ms,
                temporal_ms,
                comparisons: comparison_count(variant, cfg.height, cfg.width, t),
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut out = String::from("variant,T,spatial_median_ms,temporal_median_ms,comparisons\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.variant,
            r.frames,
            opt(r.spatial_ms),
            opt(r.temporal_ms),
            r.comparisons
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_bench_has_counts_and_columns() {
        let cfg = BenchConfig {
            height: 4,
            width: 4,
            dim: 8,
            frames: vec![1, 3],
            ..BenchConfig::default()
        };
        let rows = bench_attention(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            let expected = match r.variant {
                AttentionVariant::Space => 16,
                AttentionVariant::GlobalTimeSpace => 16 + 16 * r.frames,
                AttentionVariant::LocalTimeSpace => 16 + r.frames,
            };
            assert_eq!(r.comparisons, expected);
            assert_eq!(r.temporal_ms.is_some(), r.variant.uses_memory());
            assert!(r.spatial_ms.unwrap() >= 0.0);
        }
        let csv = bench_csv(&rows);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.contains("local_time_space,3,"));
    }

    #[test]
    fn too_few_reps_rejected() {
        let cfg = BenchConfig {
            reps: 5,
            ..BenchConfig::default()
        };
        assert!(bench_attention(&cfg).is_err());
    }
}
