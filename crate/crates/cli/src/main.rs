use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use sparsedet_core::io::{
    self, generate_scene, read_frame, read_json, write_frame, write_json, Config, DetectionRecord, FrameDetections,
    FrameGt, SceneSpec, TrackRecord,
};
use sparsedet_core::metrics::{match_and_score, EvalBox};
use sparsedet_core::pipeline::{Model, HEAD_STRIDE};
use sparsedet_core::selftest::run_selftest;
use sparsedet_core::tracker::{count_id_switches, Tagged, Tracker};
use sparsedet_core::voxelizer::PointCloud;

#[derive(Parser)]
#[command(name = "sparsedet", version, about = "Sparse voxel 3D detection and tracking")]
struct Cli {
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect boxes in one frame, or in every .svxp file of a directory.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// JSON file, or a directory when the input is one.
        #[arg(long)]
        output: PathBuf,
    },
    /// Link per-frame detections into tracks.
    Track {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of detection files written by `infer`.
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print per-layer and per-stage cost of one frame.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Override the configured prune ratio.
        #[arg(long)]
        prune_ratio: Option<f64>,
        /// Override the pruned down-sampling layers, e.g. `1,2,3`; empty for none.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        prune_stages: Option<Vec<usize>>,
    },
    /// Check the sparse kernels against dense and brute-force references.
    Selftest {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write deterministic random weights.
    GenWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Synthesise point clouds from a JSON scene description. One frame is
    /// written to `output`; several go to `output/frame_NNNN.svxp`.
    GenScene {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write per-frame ground truth.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Score detections (and optionally tracks) against ground truth.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        tracks: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Distance gate in metres for identity-switch counting.
        #[arg(long, default_value_t = 2.0)]
        id_gate: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn frame_detections(model: &Model, pc: &PointCloud) -> Result<FrameDetections> {
    let out = model.infer(pc)?;
    let detections = out
        .detections
        .iter()
        .map(|d| DetectionRecord::from_detection(d, pc.frame_id, &model.config.head))
        .collect::<sparsedet_core::Result<_>>()?;
    Ok(FrameDetections {
        frame_id: pc.frame_id,
        timestamp: pc.timestamp,
        detections,
    })
}

fn infer(config: Option<&Path>, weights: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = Model::load(load_config(config)?, weights).with_context(|| format!("loading {}", weights.display()))?;
    if !input.is_dir() {
        let pc = read_frame(input).with_context(|| format!("reading {}", input.display()))?;
        return Ok(write_json(output, &frame_detections(&model, &pc)?)?);
    }
    let frames = io::list_files(input, "svxp")?;
    let results: Vec<FrameDetections> = frames
        .par_iter()
        .map(|p| {
            let pc = read_frame(p).with_context(|| format!("reading {}", p.display()))?;
            frame_detections(&model, &pc)
        })
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    for (p, r) in frames.iter().zip(&results) {
        let stem = p.file_stem().expect("listed files have names");
        write_json(&output.join(stem).with_extension("json"), r)?;
    }
    log::info!("{} frames", frames.len());
    Ok(())
}

fn read_detections(dir: &Path) -> Result<Vec<FrameDetections>> {
    let mut frames: Vec<FrameDetections> = io::list_files(dir, "json")?
        .iter()
        .map(|p| read_json(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<_>>()?;
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.frame_id.cmp(&b.frame_id)));
    Ok(frames)
}

fn track(config: Option<&Path>, dets: &Path, output: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let mut tracker = Tracker::new();
    let mut records = Vec::new();
    for f in read_detections(dets)? {
        let ds = f
            .detections
            .iter()
            .map(|r| r.to_detection(&cfg.head, &cfg.grid, HEAD_STRIDE))
            .collect::<sparsedet_core::Result<Vec<_>>>()?;
        for t in tracker.step(f.frame_id, f.timestamp, &ds, &cfg.tracker)? {
            records.push(TrackRecord::from_output(&t, &cfg.head)?);
        }
    }
    write_json(output, &records)?;
    Ok(())
}

fn flops(
    config: Option<&Path>,
    weights: &Path,
    input: &Path,
    prune_ratio: Option<f64>,
    prune_stages: Option<Vec<usize>>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(r) = prune_ratio {
        cfg.backbone.prune_ratio = r;
    }
    if let Some(s) = prune_stages {
        cfg.backbone.prune_stages = s;
    }
    let model = Model::load(cfg, weights)?;
    let pc = read_frame(input).with_context(|| format!("reading {}", input.display()))?;
    let (out, report) = model.profile(&pc)?;
    println!("{report}");
    println!(
        "input voxels {}  bev sites {}  detections {}",
        out.input_voxels,
        out.bev_voxels,
        out.detections.len()
    );
    Ok(())
}

fn selftest(trials: usize, seed: u64) -> Result<()> {
    let results = run_selftest(trials, seed)?;
    for r in &results {
        println!(
            "{} {:<36} {:>4}/{} max err {:.3e}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.trials - r.failures,
            r.trials,
            r.max_error
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    Ok(())
}

fn gen_weights(config: Option<&Path>, seed: u64, output: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let model = Model::random(cfg, seed)?;
    io::save_weights(output, &model.backbone, &model.head, &model.config)?;
    Ok(())
}

fn gen_scene(spec: &Path, output: &Path, gt: Option<&Path>) -> Result<()> {
    let spec: SceneSpec = read_json(spec).with_context(|| format!("reading {}", spec.display()))?;
    let scene = generate_scene(&spec)?;
    if let [frame] = scene.frames.as_slice() {
        write_frame(output, frame)?;
    } else {
        std::fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
        for f in &scene.frames {
            write_frame(&output.join(format!("frame_{:04}.svxp", f.frame_id)), f)?;
        }
    }
    if let Some(gt) = gt {
        write_json(gt, &scene.gt)?;
    }
    Ok(())
}

fn tagged_by_frame(frames: &[u32], items: impl Iterator<Item = (u32, Tagged)>) -> Vec<Vec<Tagged>> {
    let mut out = vec![Vec::new(); frames.len()];
    for (f, t) in items {
        if let Ok(i) = frames.binary_search(&f) {
            out[i].push(t);
        }
    }
    out
}

fn eval(
    config: Option<&Path>,
    dets: &Path,
    gt: &Path,
    tracks: Option<&Path>,
    iou: f64,
    id_gate: f64,
    output: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let gt: Vec<FrameGt> = read_json(gt).with_context(|| format!("reading {}", gt.display()))?;
    let mut det_boxes: Vec<EvalBox> = Vec::new();
    for f in read_detections(dets)? {
        for r in &f.detections {
            det_boxes.push(r.to_eval_box(&cfg.head)?);
        }
    }
    let mut gt_boxes = Vec::new();
    for f in &gt {
        for o in &f.objects {
            gt_boxes.push(o.to_eval_box(f.frame_id, &cfg.head)?);
        }
    }
    let mut report = match_and_score(&det_boxes, &gt_boxes, iou, &cfg.head.class_names)?;
    if let Some(path) = tracks {
        let tracks: Vec<TrackRecord> = read_json(path).with_context(|| format!("reading {}", path.display()))?;
        let mut frames: Vec<u32> = gt.iter().map(|f| f.frame_id).collect();
        frames.sort_unstable();
        let tag = |id, c: [f64; 3]| Tagged {
            id,
            position: [c[0], c[1]],
        };
        let g = tagged_by_frame(
            &frames,
            gt.iter()
                .flat_map(|f| f.objects.iter().map(move |o| (f.frame_id, tag(o.id, o.center)))),
        );
        let o = tagged_by_frame(&frames, tracks.iter().map(|t| (t.frame, tag(t.id, t.center))));
        report.id_switches = Some(count_id_switches(&g, &o, id_gate));
    }
    let text = io::to_json(&report);
    match output {
        Some(p) => io::write_bytes(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build()?;
    pool.install(|| match cli.command {
        Command::Infer {
            config,
            weights,
            input,
            output,
        } => infer(config.as_deref(), &weights, &input, &output),
        Command::Track { config, dets, output } => track(config.as_deref(), &dets, &output),
        Command::Flops {
            config,
            weights,
            input,
            prune_ratio,
            prune_stages,
        } => flops(config.as_deref(), &weights, &input, prune_ratio, prune_stages),
        Command::Selftest { trials, seed } => selftest(trials, seed),
        Command::GenWeights { config, seed, output } => gen_weights(config.as_deref(), seed, &output),
        Command::GenScene { spec, output, gt } => gen_scene(&spec, &output, gt.as_deref()),
        Command::Eval {
            config,
            dets,
            gt,
            tracks,
            iou,
            id_gate,
            output,
        } => eval(config.as_deref(), &dets, &gt, tracks.as_deref(), iou, id_gate, output.as_deref()),
    })
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
