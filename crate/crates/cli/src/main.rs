use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array3;
use serde::Deserialize;

use tubelink::evaluation::{coco_thresholds, evaluate, GroundTruthBox};
use tubelink::feataggr::{aggregate_tubelet_features, AggregationConfig, FeaturePyramid};
use tubelink::headfusion::FusionOrder;
use tubelink::pipeline::records::{
    read_converted, read_jsonl, write_jsonl_file, DetectionRecord, GroundTruthRecord, TubeRecord,
    TubeletRecord,
};
use tubelink::pipeline::{run_pipeline, suppress_tubelets, PipelineConfig};
use tubelink::synth::{generate_scenario, SynthConfig, SynthRng, RNG_ALGORITHM};
use tubelink::{BBox, Detection, Error, FeatureMap, Result, Tubelet};

#[derive(Parser)]
#[command(
    name = "tubelink",
    version,
    about = "Tubelet suppression, tube linking and evaluation for video detections"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic scenario as JSON Lines.
    Synth(SynthArgs),
    /// Tubelet-NMS over a tubelet file.
    Tnms(TnmsArgs),
    /// NMS, confidence filter, linking, merging and rescoring; no tubelet suppression.
    Link(RunArgs),
    /// Pool RoI features of one tubelet over random feature maps.
    Pool(PoolArgs),
    /// Frame-level AP of detections against ground truth.
    Eval(EvalArgs),
    /// Full chain: tubelet suppression, then everything `link` does, plus metrics.
    Pipeline(RunArgs),
}

/// Declarative config file; every table and key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    pipeline: PipelineConfig,
    synth: SynthConfig,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Args)]
struct PipelineFlags {
    /// TOML file with optional [pipeline] and [synth] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tubelet_len: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tnms_iou: Option<f64>,
    #[arg(long)]
    final_nms_iou: Option<f64>,
    #[arg(long)]
    voting_iou: Option<f64>,
    #[arg(long, value_parser = parse_fusion_order)]
    fusion_order: Option<FusionOrder>,
    #[arg(long)]
    threads: Option<usize>,
    /// Stop after NMS, voting and the confidence filter.
    #[arg(long)]
    no_link: bool,
    #[arg(long)]
    no_merge: bool,
    #[arg(long)]
    no_rescore: bool,
}

fn parse_fusion_order(s: &str) -> std::result::Result<FusionOrder, String> {
    match s {
        "average_then_fuse" => Ok(FusionOrder::AverageThenFuse),
        "fuse_then_average" => Ok(FusionOrder::FuseThenAverage),
        _ => Err(format!(
            "expected average_then_fuse or fuse_then_average, got {s}"
        )),
    }
}

impl PipelineFlags {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = load_config(self.config.as_deref())?.pipeline;
        if let Some(v) = self.tubelet_len {
            c.tubelet_len = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.tnms_iou {
            c.tnms_iou = Some(v);
        }
        if let Some(v) = self.final_nms_iou {
            c.final_nms_iou = v;
        }
        if let Some(v) = self.voting_iou {
            c.voting_iou = v;
        }
        if let Some(v) = self.fusion_order {
            c.fusion_order = v;
        }
        if let Some(v) = self.threads {
            c.threads = v;
        }
        if self.no_link {
            c.link = false;
            c.merge = false;
            c.rescore = false;
        }
        if self.no_merge {
            c.merge = false;
        }
        if self.no_rescore {
            c.rescore = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, required = true)]
    seed: u64,
    /// Output directory for detections.jsonl, tubelets.jsonl and gt.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    frames: Option<u32>,
    #[arg(long)]
    tracks: Option<usize>,
    #[arg(long)]
    classes: Option<u32>,
    #[arg(long)]
    tubelet_len: Option<usize>,
    #[arg(long)]
    p_miss: Option<f64>,
    #[arg(long)]
    p_confuse: Option<f64>,
    #[arg(long)]
    fp_rate: Option<f64>,
    #[arg(long)]
    video: Option<String>,
}

#[derive(Args)]
struct TnmsArgs {
    #[arg(long)]
    tubelets: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: PipelineFlags,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    tubelets: Option<PathBuf>,
    /// Ground truth; adds metrics.json to the output.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: PipelineFlags,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tubelet length.
    #[arg(long, default_value_t = 6)]
    frames: usize,
    #[arg(long, default_value_t = 256)]
    channels: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Comma-separated IoU thresholds.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    iou: Vec<f64>,
    /// Average over 0.50:0.05:0.95 instead of --iou.
    #[arg(long)]
    coco: bool,
}

fn read_detections(path: &Path, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    let fusion = cfg.fuse_heads.then_some(cfg.fusion_order);
    read_converted(path, |r: &DetectionRecord| r.to_detection(fusion))
}

fn read_tubelets(path: &Path) -> Result<Vec<Tubelet>> {
    read_converted(path, TubeletRecord::to_tubelet)
}

fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthBox>> {
    read_converted(path, GroundTruthRecord::to_ground_truth)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut c = load_config(a.config.as_deref())?.synth;
    c.seed = a.seed;
    if let Some(v) = a.frames {
        c.frames = v;
    }
    if let Some(v) = a.tracks {
        c.n_tracks = v;
    }
    if let Some(v) = a.classes {
        c.n_classes = v;
    }
    if let Some(v) = a.tubelet_len {
        c.tubelet_len = v;
    }
    if let Some(v) = a.p_miss {
        c.noise.p_miss = v;
    }
    if let Some(v) = a.p_confuse {
        c.noise.p_confuse = v;
    }
    if let Some(v) = a.fp_rate {
        c.noise.fp_rate = v;
    }
    if let Some(v) = &a.video {
        c.video = v.clone();
    }
    let s = generate_scenario(&c)?;
    std::fs::create_dir_all(&a.out)?;
    let dets: Vec<DetectionRecord> = s
        .detections
        .iter()
        .map(DetectionRecord::from_detection)
        .collect();
    let tubelets: Vec<TubeletRecord> = s.tubelets.iter().map(TubeletRecord::from_tubelet).collect();
    let gt: Vec<GroundTruthRecord> = s
        .ground_truth
        .iter()
        .map(GroundTruthRecord::from_ground_truth)
        .collect();
    write_jsonl_file(&a.out.join("detections.jsonl"), &dets)?;
    write_jsonl_file(&a.out.join("tubelets.jsonl"), &tubelets)?;
    write_jsonl_file(&a.out.join("gt.jsonl"), &gt)?;
    eprintln!(
        "synth: seed {} ({RNG_ALGORITHM}): {} detections, {} tubelets, {} ground-truth boxes",
        c.seed,
        dets.len(),
        tubelets.len(),
        gt.len()
    );
    Ok(())
}

fn tnms(a: &TnmsArgs) -> Result<()> {
    let cfg = a.flags.resolve()?;
    let records: Vec<TubeletRecord> = read_jsonl(&a.tubelets)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let tubelets = read_tubelets(&a.tubelets)?;
    let kept = suppress_tubelets(&tubelets, &cfg)?;
    // pass survivors through as ingested, unknown fields included
    let mut by_key: BTreeMap<(String, String, u32), &TubeletRecord> = BTreeMap::new();
    for r in &records {
        by_key.insert((r.video.clone(), r.id.clone(), r.end_frame), r);
    }
    let out: Vec<TubeletRecord> = kept
        .iter()
        .map(|t| (*by_key[&(t.video.clone(), t.id.clone(), t.end_frame)]).clone())
        .collect();
    write_jsonl_file(&a.out, &out)?;
    eprintln!("tnms: kept {} of {} tubelets", out.len(), records.len());
    Ok(())
}

fn run(a: &RunArgs, suppress: bool) -> Result<()> {
    let mut cfg = a.flags.resolve()?;
    if !suppress {
        // overlap never exceeds 1, so nothing is suppressed
        cfg.tnms_iou = Some(1.0);
    }
    let dets = read_detections(&a.detections, &cfg)?;
    let tubelets = match &a.tubelets {
        Some(p) => read_tubelets(p)?,
        None => Vec::new(),
    };
    let gt = a.gt.as_deref().map(read_ground_truth).transpose()?;
    let out = run_pipeline(&dets, &tubelets, gt.as_deref(), &cfg)?;

    std::fs::create_dir_all(&a.out)?;
    let det_records: Vec<DetectionRecord> = out
        .detections
        .iter()
        .map(DetectionRecord::from_detection)
        .collect();
    write_jsonl_file(&a.out.join("detections.jsonl"), &det_records)?;
    if cfg.link {
        let tubes: Vec<TubeRecord> = out.tubes.iter().map(TubeRecord::from_tube).collect();
        write_jsonl_file(&a.out.join("tubes.jsonl"), &tubes)?;
    }
    if suppress && a.tubelets.is_some() {
        let kept: Vec<TubeletRecord> = out
            .tubelets
            .iter()
            .map(TubeletRecord::from_tubelet)
            .collect();
        write_jsonl_file(&a.out.join("tubelets.jsonl"), &kept)?;
    }
    if let Some(m) = &out.metrics {
        write_json(&a.out.join("metrics.json"), m)?;
        eprintln!("mAP {:.4} over thresholds {:?}", m.map, m.iou_thresholds);
    }
    eprintln!(
        "{} detections in, {} out, {} tubes",
        dets.len(),
        out.detections.len(),
        out.tubes.len()
    );
    Ok(())
}

fn pool(a: &PoolArgs) -> Result<()> {
    if a.frames == 0 || a.channels == 0 {
        return Err(Error::Config(
            "--frames and --channels must be positive".into(),
        ));
    }
    let mut rng = SynthRng::new(a.seed);
    let image = 256.0;
    let mut pyramids: BTreeMap<u32, FeaturePyramid> = BTreeMap::new();
    for f in 0..a.frames as u32 {
        let mut p = FeaturePyramid::new();
        for level in 2..=5 {
            let stride = f64::from(1u32 << level);
            let side = (image / stride) as usize;
            let data = Array3::from_shape_fn((side, side, a.channels), |_| rng.normal() as f32);
            p.insert(level, FeatureMap::new(data, stride)?);
        }
        pyramids.insert(f, p);
    }
    let (cx, cy) = (rng.uniform(96.0, 160.0), rng.uniform(96.0, 160.0));
    let size = rng.uniform(32.0, 128.0);
    let boxes = (0..a.frames)
        .map(|k| BBox::from_center(cx + 2.0 * k as f64, cy, size, size * 0.75))
        .collect::<Result<Vec<_>>>()?;
    let ids = (0..a.frames).map(|k| format!("demo@{k}")).collect();
    let t = Tubelet::new(
        "demo",
        "demo",
        a.frames as u32 - 1,
        boxes,
        vec![1.0; a.frames],
        ids,
    )?;
    let cfg = AggregationConfig::default();
    let pooled = aggregate_tubelet_features(&pyramids, &t, &cfg)?;
    let (h, w, c) = pooled.dim();
    let mean = pooled.iter().map(|&v| f64::from(v)).sum::<f64>() / pooled.len() as f64;
    let max = pooled.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let summary = serde_json::json!({
        "frames": a.frames,
        "level": cfg.levels.level_of(&t.boxes[0]),
        "concatenated_channels": a.frames * c,
        "pooled_shape": [h, w, c],
        "mean": mean,
        "max": max,
    });
    print_stdout(&summary.to_string())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let dets = read_detections(&a.detections, &PipelineConfig::default())?;
    let gt = read_ground_truth(&a.gt)?;
    let thresholds = if a.coco {
        coco_thresholds()
    } else {
        a.iou.clone()
    };
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config(format!(
            "invalid IoU thresholds {thresholds:?}"
        )));
    }
    let classes: BTreeSet<u32> = gt.iter().map(|g| g.class_id).collect();
    if classes.is_empty() {
        return Err(Error::Ingest {
            file: a.gt.clone(),
            line: 0,
            message: "no ground truth".into(),
        });
    }
    let report = evaluate(&dets, &gt, &thresholds)?;
    print_stdout(
        &serde_json::to_string_pretty(&report).map_err(|e| Error::Internal(e.to_string()))?,
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Tnms(a) => tnms(a),
        Command::Link(a) => run(a, false),
        Command::Pool(a) => pool(a),
        Command::Eval(a) => eval(a),
        Command::Pipeline(a) => run(a, true),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
