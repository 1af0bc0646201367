//! `vpst`: synthetic data, streaming inference, evaluation, benchmarks,
//! gradient checks and overlay rendering.
//!
//! Exit codes: 0 success, 1 configuration error, 2 invariant violation,
//! 3 acceptance failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use vpst::harness::{
    bench_attention, bench_csv, evaluate, gradcheck, render_overlay, run_pipeline, write_json,
    write_run, BenchConfig, BenchRow, FlowSource, GradcheckConfig, PipelineConfig, PipelineOutput,
    PredictionSource,
};
use vpst::metrics::{table_csv, MetricReport, TableRow};
use vpst::synth::{
    generate_sequence, load_sequence, save_sequence, write_ppm, SceneConfig, SyntheticSequence,
};
use vpst::transformer::comparison_count;
use vpst::{AttentionVariant, PanopticMap};

#[derive(Debug)]
enum CliError {
    Config(String),
    Invariant(String),
    Acceptance(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Invariant(_) => 2,
            CliError::Acceptance(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Invariant(m) => write!(f, "invariant violation: {m}"),
            CliError::Acceptance(m) => write!(f, "acceptance failure: {m}"),
        }
    }
}

impl From<vpst::Error> for CliError {
    fn from(e: vpst::Error) -> Self {
        use vpst::Error as E;
        match e {
            E::Config(_) | E::Usage(_) | E::Io(_) | E::Json(_) | E::Image(_) | E::Format { .. } => {
                CliError::Config(e.to_string())
            }
            E::Shape { .. }
            | E::Numeric(_)
            | E::EmptyMemory(_)
            | E::Invariant(_)
            | E::Invalid(_) => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "vpst", version, about = "Video panoptic segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence with exact annotations.
    Synth(SynthArgs),
    /// Stream a sequence through the pipeline and write all outputs.
    Run(RunArgs),
    /// Score saved panoptic maps against a sequence.
    Eval(EvalArgs),
    /// Time the attention stages of every variant.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Draw panoptic overlays on the frames of a sequence.
    Render(RenderArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON scene configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    max_speed: Option<i32>,
    #[arg(long, action = ArgAction::Set)]
    non_overlapping: Option<bool>,
    #[arg(long, action = ArgAction::Set)]
    stay_inside: Option<bool>,
    #[arg(long, action = ArgAction::Set)]
    sub_pixel: Option<bool>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Sequence directory written by `synth`.
    #[arg(long)]
    seq: PathBuf,
    /// JSON pipeline configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<AttentionVariant>,
    /// Memory length S.
    #[arg(long)]
    memory: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, action = ArgAction::Set)]
    tracking: Option<bool>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_parser = snake::<FlowSource>)]
    flow: Option<FlowSource>,
    #[arg(long, value_parser = snake::<PredictionSource>)]
    prediction: Option<PredictionSource>,
    /// Sets the model, backbone and corruption seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    windows: Vec<usize>,
    #[arg(long)]
    no_overlays: bool,
    /// Exit with code 3 if the mean VPQ is below this value.
    #[arg(long)]
    min_vpq: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    seq: PathBuf,
    /// Run directory, or a directory of `panoptic_XXXX.tsr` maps.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 5, 10, 15])]
    windows: Vec<usize>,
    /// Directory for metrics.json and metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    min_vpq: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    frames: Vec<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Skip timing the spatial stage.
    #[arg(long)]
    no_spatial: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Gate on the T=4 / T=1 time-stage ratios (local <= 1.3, global >= 2.0).
    #[arg(long)]
    check: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check a single variant; all three by default.
    #[arg(long)]
    variant: Option<AttentionVariant>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    seq: PathBuf,
    /// Run directory or map directory; ground truth when omitted.
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn snake<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown value {s:?}"))
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn snapshot(dir: &Path, name: &str, value: &impl Serialize) -> CliResult {
    fs::create_dir_all(dir)?;
    write_json(dir.join(name), value)?;
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_maps(dir: &Path) -> CliResult<Vec<PanopticMap>> {
    let dir = if dir.join("maps").is_dir() {
        dir.join("maps")
    } else {
        dir.to_path_buf()
    };
    let mut maps = Vec::new();
    loop {
        let p = dir.join(format!("panoptic_{:04}.tsr", maps.len()));
        if !p.exists() {
            break;
        }
        maps.push(PanopticMap::load(p)?);
    }
    if maps.is_empty() {
        return Err(CliError::Config(format!(
            "no panoptic_0000.tsr in {}",
            dir.display()
        )));
    }
    Ok(maps)
}

fn print_report(report: &MetricReport) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    println!(
        "PQ    {:6.2}  Th {}  St {}",
        report.pq,
        opt(report.pq_th),
        opt(report.pq_st)
    );
    for r in &report.per_k {
        println!(
            "VPQ_{:<2} {:6.2}  Th {}  St {}",
            r.k,
            r.vpq,
            opt(r.vpq_th),
            opt(r.vpq_st)
        );
    }
    println!(
        "VPQ   {:6.2}  Th {}  St {}",
        report.vpq,
        opt(report.vpq_th),
        opt(report.vpq_st)
    );
}

fn gate(report: &MetricReport, min_vpq: Option<f64>) -> CliResult {
    match min_vpq {
        Some(m) if report.vpq < m => Err(CliError::Acceptance(format!(
            "VPQ {:.3} below {m}",
            report.vpq
        ))),
        _ => Ok(()),
    }
}

fn synth(a: SynthArgs) -> CliResult {
    let mut cfg: SceneConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.n_frames, a.frames);
    set(&mut cfg.height, a.height);
    set(&mut cfg.width, a.width);
    set(&mut cfg.n_objects, a.objects);
    set(&mut cfg.max_speed, a.max_speed);
    set(&mut cfg.non_overlapping, a.non_overlapping);
    set(&mut cfg.stay_inside, a.stay_inside);
    set(&mut cfg.sub_pixel, a.sub_pixel);
    let seq = generate_sequence(&cfg, a.seed)?;
    save_sequence(&seq, &a.out)?;
    snapshot(&a.out, "scene_config.json", &cfg)?;
    println!(
        "wrote {} frames of {}x{} to {}",
        seq.len(),
        cfg.height,
        cfg.width,
        a.out.display()
    );
    Ok(())
}

fn run(a: RunArgs) -> CliResult {
    let mut cfg: PipelineConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.variant, a.variant);
    set(&mut cfg.memory, a.memory);
    set(&mut cfg.dim, a.dim);
    set(&mut cfg.heads, a.heads);
    set(&mut cfg.stride, a.stride);
    set(&mut cfg.tracking, a.tracking);
    set(&mut cfg.tracker_threshold, a.threshold);
    set(&mut cfg.flow_source, a.flow);
    set(&mut cfg.prediction, a.prediction);
    if let Some(s) = a.seed {
        cfg.model_seed = s;
        cfg.backbone_seed = s;
        cfg.corruption_seed = s;
    }
    if !a.windows.is_empty() {
        cfg.windows = a.windows;
    }
    cfg.validate()?;
    let seq = load_sequence(&a.seq)?;
    cfg.module_config(seq.config.height, seq.config.width)?;
    cfg.windows_for(seq.len())?;
    let out: PipelineOutput = run_pipeline(&seq, &cfg)?;
    let report = write_run(&a.out, &seq, &cfg, &out, !a.no_overlays)?;
    let ms = out.timing.iter().map(|t| t.total).sum::<f64>() / out.timing.len().max(1) as f64;
    println!(
        "{} S={} on {} frames, {ms:.2} ms/frame",
        cfg.variant,
        cfg.memory,
        seq.len()
    );
    print_report(&report);
    gate(&report, a.min_vpq)
}

fn eval(a: EvalArgs) -> CliResult {
    let seq = load_sequence(&a.seq)?;
    let maps = load_maps(&a.pred)?;
    if maps.len() != seq.len() {
        return Err(CliError::Invariant(format!(
            "{} maps for {} frames",
            maps.len(),
            seq.len()
        )));
    }
    let cfg = PipelineConfig {
        windows: a.windows,
        ..PipelineConfig::default()
    };
    cfg.validate()?;
    let out = PipelineOutput {
        maps,
        timing: Vec::new(),
    };
    let report = evaluate(&out, &seq, &cfg)?;
    if let Some(dir) = &a.out {
        snapshot(dir, "metrics.json", &report)?;
        let row = TableRow {
            name: a.pred.display().to_string(),
            time_ms: None,
            report: report.clone(),
        };
        fs::write(dir.join("metrics.csv"), table_csv(&[row])?)?;
    }
    print_report(&report);
    gate(&report, a.min_vpq)
}

fn ratio(rows: &[BenchRow], v: AttentionVariant) -> CliResult<f64> {
    let t = |f: usize| {
        rows.iter()
            .find(|r| r.variant == v && r.frames == f)
            .and_then(|r| r.temporal_ms)
            .ok_or_else(|| CliError::Config("--check needs frames 1 and 4".into()))
    };
    Ok(t(4)? / t(1)?)
}

fn bench(a: BenchArgs) -> CliResult {
    let mut cfg: BenchConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.height, a.height);
    set(&mut cfg.width, a.width);
    set(&mut cfg.dim, a.dim);
    set(&mut cfg.heads, a.heads);
    set(&mut cfg.reps, a.reps);
    set(&mut cfg.warmup, a.warmup);
    set(&mut cfg.seed, a.seed);
    if !a.frames.is_empty() {
        cfg.frames = a.frames;
    }
    if a.no_spatial {
        cfg.spatial = false;
    }
    let rows = bench_attention(&cfg)?;
    for r in &rows {
        if r.comparisons != comparison_count(r.variant, cfg.height, cfg.width, r.frames) {
            return Err(CliError::Invariant(format!(
                "{} T={} comparison count mismatch",
                r.variant, r.frames
            )));
        }
    }
    let csv = bench_csv(&rows);
    print!("{csv}");
    if let Some(dir) = &a.out {
        snapshot(dir, "bench_config.json", &cfg)?;
        fs::write(dir.join("bench.csv"), &csv)?;
    }
    if a.check {
        let local = ratio(&rows, AttentionVariant::LocalTimeSpace)?;
        let global = ratio(&rows, AttentionVariant::GlobalTimeSpace)?;
        println!("time-stage ratio T=4/T=1: local {local:.3}, global {global:.3}");
        if local > 1.3 || global < 2.0 {
            return Err(CliError::Acceptance(format!(
                "local {local:.3} (<= 1.3), global {global:.3} (>= 2.0)"
            )));
        }
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult {
    let variants = match a.variant {
        Some(v) => vec![v],
        None => AttentionVariant::ALL.to_vec(),
    };
    let base: Option<GradcheckConfig> = match &a.config {
        Some(p) => Some(load_config(Some(p))?),
        None => None,
    };
    let mut reports = Vec::new();
    for v in variants {
        let cfg = match &base {
            Some(b) => GradcheckConfig {
                variant: v,
                ..b.clone()
            },
            None => GradcheckConfig::for_variant(v),
        };
        let r = gradcheck(&cfg, a.seed)?;
        for p in &r.params {
            println!(
                "{:<18} {:<16} {:>6}  rel {:.2e}  {}",
                v.to_string(),
                p.name,
                p.numel,
                p.rel_error,
                if p.pass { "ok" } else { "FAIL" }
            );
        }
        println!(
            "{v}: max relative error {:.2e} {}",
            r.max_rel_error,
            if r.pass { "PASS" } else { "FAIL" }
        );
        reports.push(r);
    }
    if let Some(p) = &a.out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_json(p, &reports)?;
    }
    match reports.iter().find(|r| !r.pass) {
        Some(r) => Err(CliError::Acceptance(format!(
            "{} gradients off by {:.2e}",
            r.variant, r.max_rel_error
        ))),
        None => Ok(()),
    }
}

fn render(a: RenderArgs) -> CliResult {
    let seq: SyntheticSequence = load_sequence(&a.seq)?;
    let maps = match &a.maps {
        Some(d) => load_maps(d)?,
        None => seq.gt_panoptic.clone(),
    };
    if maps.len() > seq.len() {
        return Err(CliError::Invariant(format!(
            "{} maps for {} frames",
            maps.len(),
            seq.len()
        )));
    }
    fs::create_dir_all(&a.out)?;
    for (t, m) in maps.iter().enumerate() {
        let img = render_overlay(&seq.frames[t], m, &seq.partition)?;
        write_ppm(a.out.join(format!("overlay_{t:04}.ppm")), &img)?;
    }
    println!("wrote {} overlays to {}", maps.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Render(a) => render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
