//! `densedet`: data generation, training, evaluation, inference, gradient
//! checks and ablations from the command line.
//!
//! Results go to stdout as JSON lines. Failures print a single JSON object
//! `{"error": kind, "message": text}` to stderr and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use densedet::ablation::run_ablation;
use densedet::checkpoint;
use densedet::config::RunConfig;
use densedet::eval::{write_records, Record};
use densedet::gradcheck::suite;
use densedet::model::Detector;
use densedet::synth::{generate_split, load_split, read_ppm, save_split};
use densedet::train::{evaluate, evaluation_records, train, RunDir, CHECKPOINT_FILE, CONFIG_FILE};

#[derive(Parser)]
#[command(name = "densedet", version, about = "Dense small-object detector on CPU")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train and test splits.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset and write checkpoint, config and metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding `train/` and optionally `test/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split and report mAP at IoU 0.5.
    Eval {
        /// Checkpoint file or run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split directory (with `manifest.txt`) or a dataset root with `test/`.
        #[arg(long)]
        data: PathBuf,
        /// Run config; defaults to the one saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write `detections.txt`, `ground_truth.txt` and `eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect objects in one PPM image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every operator and block.
    GradCheck {
        /// Run only this case.
        #[arg(long)]
        op: Option<String>,
        /// List case names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Train several ablation rows and report mean test mAP per row.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated rows among base,b,c,d,e,f,g,h.
        #[arg(long, value_delimiter = ',', default_value = "base,b,c,d,e,f,g,h")]
        rows: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Keep each run's artifacts under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl From<densedet::Error> for Failure {
    fn from(e: densedet::Error) -> Self {
        Failure { kind: e.kind(), message: e.to_string() }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            fail(&Failure { kind: "usage", message: first.to_string() });
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            fail(&f);
            ExitCode::FAILURE
        }
    }
}

fn fail(f: &Failure) {
    eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn run(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::GenData { config, out } => gen_data(config.as_deref(), &out),
        Cmd::Train { config, data, out } => train_cmd(config.as_deref(), &data, &out),
        Cmd::Eval { checkpoint, data, config, out } => eval_cmd(&checkpoint, &data, config.as_deref(), out.as_deref()),
        Cmd::Infer { checkpoint, image, config } => infer_cmd(&checkpoint, &image, config.as_deref()),
        Cmd::GradCheck { op, list } => grad_check(op.as_deref(), list),
        Cmd::Ablate { config, rows, seeds, out } => ablate(config.as_deref(), &rows, &seeds, out.as_deref()),
    }
}

fn gen_data(config: Option<&Path>, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let synth = &cfg.data.synth;
    for (name, stream, count) in [("train", 0, cfg.data.train_images), ("test", 1, cfg.data.test_images)] {
        let samples = generate_split(synth, stream, count)?;
        save_split(&out.join(name), &samples)?;
        let objects: usize = samples.iter().map(|s| s.boxes.len()).sum();
        emit(json!({ "split": name, "images": count, "objects": objects, "dir": out.join(name) }));
    }
    Ok(())
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let stride = cfg.model.feature_stride();
    let train_set = load_split(&data.join("train"), stride)?;
    let test_dir = data.join("test");
    let test_set = if test_dir.is_dir() { Some(load_split(&test_dir, stride)?) } else { None };
    let (_, m) = train(&cfg, &train_set, test_set.as_deref(), Some(&RunDir(out.to_path_buf())))?;
    for e in &m.epochs {
        emit(json!(e));
    }
    emit(json!({ "config_hash": m.config_hash, "map": m.map, "out": out }));
    Ok(())
}

/// Loads a detector from a checkpoint file or a run directory.
fn load_detector(path: &Path, config: Option<&Path>) -> Result<(RunConfig, Detector), Failure> {
    let (ckpt, dir) = if path.is_dir() {
        (path.join(CHECKPOINT_FILE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let cfg = RunConfig::load(&config.map_or_else(|| dir.join(CONFIG_FILE), Path::to_path_buf))?;
    let mut det = Detector::new(cfg.model.clone(), cfg.train.seed)?;
    checkpoint::load_into(&ckpt, &mut det.store)?;
    Ok((cfg, det))
}

fn eval_cmd(ckpt: &Path, data: &Path, config: Option<&Path>, out: Option<&Path>) -> CliResult {
    let (cfg, det) = load_detector(ckpt, config)?;
    let split = if data.join("test").is_dir() { data.join("test") } else { data.to_path_buf() };
    let samples = load_split(&split, cfg.model.feature_stride())?;
    let ev = evaluate(&det, &samples, &cfg.nms)?;
    let detections: usize = ev.images.iter().map(|r| r.dets.len()).sum();
    let summary = json!({ "map": ev.map, "images": ev.images.len(), "detections": detections, "config_hash": cfg.identity_hash() });
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| Failure { kind: "io", message: format!("{}: {e}", out.display()) })?;
        let (dets, gts) = evaluation_records(&ev);
        write_records(&out.join("detections.txt"), &dets)?;
        write_records(&out.join("ground_truth.txt"), &gts)?;
        let p = out.join("eval.json");
        std::fs::write(&p, summary.to_string()).map_err(|e| Failure { kind: "io", message: format!("{}: {e}", p.display()) })?;
    }
    emit(summary);
    Ok(())
}

fn infer_cmd(ckpt: &Path, image: &Path, config: Option<&Path>) -> CliResult {
    let (cfg, det) = load_detector(ckpt, config)?;
    let img = read_ppm(image)?;
    let dets = det.detect(&img, &cfg.nms)?.pop().unwrap_or_default();
    let id = image.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    for d in dets {
        let r = Record { image_id: id.clone(), bbox: d.bbox, score: Some(d.score) };
        emit(json!({ "image_id": r.image_id, "bbox": r.bbox.coords(), "score": d.score }));
    }
    Ok(())
}

fn grad_check(op: Option<&str>, list: bool) -> CliResult {
    let cases = match op {
        Some(name) => vec![suite::find(name).ok_or_else(|| Failure { kind: "usage", message: format!("unknown gradient case `{name}`") })?],
        None => suite::cases(),
    };
    if list {
        for c in &cases {
            println!("{}", c.name);
        }
        return Ok(());
    }
    let mut failed = Vec::new();
    for c in &cases {
        let r = c.run()?;
        let tol = c.tier.tolerance();
        let pass = r.max_rel_err < tol;
        if !pass {
            failed.push(c.name);
        }
        emit(json!({
            "op": c.name, "tier": format!("{:?}", c.tier).to_lowercase(), "max_rel_err": r.max_rel_err,
            "tolerance": tol, "coords": r.coords_checked, "kinks_skipped": r.kinks_skipped, "pass": pass,
        }));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { kind: "gradcheck", message: format!("{} case(s) over tolerance: {}", failed.len(), failed.join(",")) })
    }
}

fn ablate(config: Option<&Path>, rows: &[String], seeds: &[u64], out: Option<&Path>) -> CliResult {
    let cfg = load_config(config)?;
    let rows: Vec<&str> = rows.iter().map(String::as_str).collect();
    let summaries = run_ablation(&cfg, &rows, seeds, out, |r| emit(json!(r)))?;
    for s in summaries {
        emit(json!({ "row": s.row, "mean_map": s.mean_map, "seeds": s.runs.len() }));
    }
    Ok(())
}
