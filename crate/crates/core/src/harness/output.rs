use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::harness::config::PipelineConfig;
use crate::harness::pipeline::{timing_csv, PipelineOutput};
use crate::harness::render::render_overlay;
use crate::metrics::{table_csv, vpq_average, MatchParams, MetricReport, TableRow};
use crate::synth::{write_ppm, SyntheticSequence};
use crate::tracking::{write_track_lines, TrackRecord};

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Evaluates `out` against the sequence annotations.
pub fn evaluate(
    out: &PipelineOutput,
    seq: &SyntheticSequence,
    cfg: &PipelineConfig,
) -> Result<MetricReport> {
    let ks = cfg.windows_for(seq.len())?;
    vpq_average(
        &out.maps,
        &seq.gt_panoptic,
        &ks,
        &seq.partition,
        &MatchParams::default(),
    )
}

/// Writes maps, tracks, metrics, overlays, timing and the resolved config
/// under `dir`.
pub fn write_run(
    dir: impl AsRef<Path>,
    seq: &SyntheticSequence,
    cfg: &PipelineConfig,
    out: &PipelineOutput,
    overlays: bool,
) -> Result<MetricReport> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("maps"))?;
    write_json(dir.join("config.json"), cfg)?;
    for (t, m) in out.maps.iter().enumerate() {
        m.save(dir.join("maps").join(format!("panoptic_{t:04}.tsr")))?;
    }
    let records: Vec<TrackRecord> = out
        .maps
        .iter()
        .enumerate()
        .map(|(t, m)| TrackRecord::from_map(t, m, &seq.partition))
        .collect();
    write_track_lines(fs::File::create(dir.join("tracks.jsonl"))?, &records)?;
    fs::write(dir.join("timing.csv"), timing_csv(&out.timing))?;
    if overlays {
        fs::create_dir_all(dir.join("overlays"))?;
        for (t, m) in out.maps.iter().enumerate() {
            let img = render_overlay(&seq.frames[t], m, &seq.partition)?;
            write_ppm(
                dir.join("overlays").join(format!("overlay_{t:04}.ppm")),
                &img,
            )?;
        }
    }
    let report = evaluate(out, seq, cfg)?;
    write_json(dir.join("metrics.json"), &report)?;
    let n = out.timing.len().max(1) as f64;
    let row = TableRow {
        name: format!("{}_S{}", cfg.variant, cfg.memory),
        time_ms: Some(out.timing.iter().map(|t| t.total).sum::<f64>() / n),
        report: report.clone(),
    };
    fs::write(dir.join("metrics.csv"), table_csv(&[row])?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::PredictionSource;
    use crate::harness::pipeline::run_pipeline;
    use crate::panoptic::PanopticMap;
    use crate::synth::{generate_sequence, SceneConfig};

    #[test]
    fn run_directory_layout() {
        let seq = generate_sequence(
            &SceneConfig {
                n_frames: 5,
                ..SceneConfig::default()
            },
            2,
        )
        .unwrap();
        let cfg = PipelineConfig {
            prediction: PredictionSource::GtInject,
            windows: vec![1, 5],
            ..PipelineConfig::default()
        };
        let out = run_pipeline(&seq, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = write_run(dir.path(), &seq, &cfg, &out, true).unwrap();
        assert_eq!(report.vpq, 100.0);
        for f in [
            "config.json",
            "tracks.jsonl",
            "timing.csv",
            "metrics.json",
            "metrics.csv",
        ] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let back = PanopticMap::load(dir.path().join("maps/panoptic_0004.tsr")).unwrap();
        assert_eq!(back, out.maps[4]);
        assert!(dir.path().join("overlays/overlay_0000.ppm").is_file());
        let lines = fs::read_to_string(dir.path().join("tracks.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 5);
        let snap: PipelineConfig =
            serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap())
                .unwrap();
        assert_eq!(snap, cfg);
    }
}
