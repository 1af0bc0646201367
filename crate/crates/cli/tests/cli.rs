use std::path::Path;
use std::process::{Command, Output};

fn vpst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpst"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    let o = vpst(&[
        "synth",
        "--seed",
        "3",
        "--frames",
        "6",
        "--stay-inside",
        "true",
        "--non-overlapping",
        "true",
        "--out",
        p(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_run_eval_render() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    let run = tmp.path().join("run");
    synth(&seq);
    assert!(seq.join("manifest.json").exists());
    assert!(seq.join("scene_config.json").exists());

    let o = vpst(&[
        "run",
        "--seq",
        p(&seq),
        "--prediction",
        "gt_inject",
        "--windows",
        "1,5",
        "--min-vpq",
        "100",
        "--out",
        p(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "config.json",
        "metrics.json",
        "metrics.csv",
        "timing.csv",
        "tracks.jsonl",
        "maps/panoptic_0005.tsr",
        "overlays/overlay_0000.ppm",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["prediction"], "gt_inject");
    assert_eq!(snap["windows"], serde_json::json!([1, 5]));

    let eval_dir = tmp.path().join("eval");
    let o = vpst(&[
        "eval",
        "--seq",
        p(&seq),
        "--pred",
        p(&run),
        "--windows",
        "1,5",
        "--out",
        p(&eval_dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("100.00"));
    assert_eq!(
        std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap(),
        std::fs::read_to_string(run.join("metrics.json")).unwrap()
    );

    let o = vpst(&[
        "render",
        "--seq",
        p(&seq),
        "--maps",
        p(&run),
        "--out",
        p(&tmp.path().join("ov")),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_dir(tmp.path().join("ov")).unwrap().count(), 6);
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    synth(&seq);
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"variant": "local_time_space", "memory": 2, "windows": [1]}"#,
    )
    .unwrap();
    let run = tmp.path().join("run");
    let o = vpst(&[
        "run",
        "--seq",
        p(&seq),
        "--config",
        p(&cfg),
        "--memory",
        "3",
        "--no-overlays",
        "--out",
        p(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["variant"], "local_time_space");
    assert_eq!(snap["memory"], 3);
    assert!(!run.join("overlays").exists());
}

#[test]
fn inconsistent_config_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    synth(&seq);
    let o = vpst(&[
        "run",
        "--seq",
        p(&seq),
        "--variant",
        "space",
        "--memory",
        "2",
        "--out",
        p(&tmp.path().join("r")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(!tmp.path().join("r").exists());
    let o = vpst(&[
        "run",
        "--seq",
        p(&tmp.path().join("missing")),
        "--out",
        p(&tmp.path().join("r")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn mismatched_maps_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a);
    assert_eq!(code(&vpst(&["synth", "--frames", "4", "--out", p(&b)])), 0);
    let run = tmp.path().join("run");
    assert_eq!(
        code(&vpst(&[
            "run",
            "--seq",
            p(&b),
            "--prediction",
            "gt_inject",
            "--windows",
            "1",
            "--out",
            p(&run)
        ])),
        0
    );
    let o = vpst(&["eval", "--seq", p(&a), "--pred", p(&run), "--windows", "1"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = vpst(&[
        "eval",
        "--seq",
        p(&a),
        "--pred",
        p(&tmp.path().join("nothing")),
        "--windows",
        "1",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn unmet_gate_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    synth(&seq);
    let o = vpst(&[
        "run",
        "--seq",
        p(&seq),
        "--prediction",
        "gt_corrupt",
        "--tracking",
        "false",
        "--windows",
        "1,5",
        "--min-vpq",
        "100",
        "--no-overlays",
        "--out",
        p(&tmp.path().join("r")),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_single_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g.json");
    let o = vpst(&["gradcheck", "--variant", "local", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(r[0]["pass"], true);
}

#[test]
fn bench_writes_csv_and_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vpst(&[
        "bench",
        "--height",
        "8",
        "--width",
        "8",
        "--dim",
        "16",
        "--frames",
        "1,2",
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("bench.csv")).unwrap();
    assert!(csv.starts_with("variant,T,"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(tmp.path().join("bench_config.json").exists());
    let o = vpst(&["bench", "--reps", "3"]);
    assert_eq!(code(&o), 1);
}
