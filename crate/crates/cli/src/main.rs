//! Operator surface: dataset generation, codec pretraining, world-model
//! training, rollout inference, evaluation, and point-cloud export.
//!
//! Exit codes: 0 success, 2 config/validation error, 3 runtime numeric
//! failure. Errors go to stderr as one JSON object.

use clap::{Parser, Subcommand};
use fourcast::codec::{pretrain_codec, replicate3, DepthNorm};
use fourcast::config::{Action, Config};
use fourcast::dataset::{read_pgm16, read_ppm, write_pgm16, write_ppm, Dataset, DepthMeta, Split};
use fourcast::diffusion::RolloutOptions;
use fourcast::error::Error as CoreError;
use fourcast::model::{evaluate, rollout_from_frame};
use fourcast::pointcloud::{backproject, export_ply_frame, export_ply_merged, Intrinsics, PointCloud};
use fourcast::tensor::Tensor;
use fourcast::trainer::{
    load_checkpoint, load_codec_checkpoint, run_training, save_codec_checkpoint, TrainState,
};
use fourcast::world::FAR_PLANE;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "fourcast", version, about = "4D driving-scene forecaster: joint future RGB + depth")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic driving dataset with analytic depth.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the shared latent codec on a dataset.
    PretrainCodec {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the world model against a dataset and a frozen codec.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a 4D future from one condition frame.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        action: String,
        /// Frames including the condition frame; defaults to the trained M.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Classifier-free guidance scale.
        #[arg(long, default_value_t = 1.0)]
        guidance: f64,
        /// Reverse steps; defaults to the configured sampler steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Use the EMA weights.
        #[arg(long, default_value_t = false)]
        ema: bool,
        /// Also write a merged 4D point cloud.
        #[arg(long, default_value_t = false)]
        ply: bool,
    },
    /// Score rollouts on the held-out split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        ema: bool,
    },
    /// Back-project image-depth pairs into per-frame and merged point clouds.
    ExportPointcloud {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    seed: u64,
    git_describe: String,
    output_paths: Vec<String>,
    warnings: Vec<String>,
    timings_ms: f64,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn sha256_hex(s: &str) -> String {
    let mut h = Sha256::new();
    h.update(s.as_bytes());
    format!("{:x}", h.finalize())
}

struct ManifestBuilder {
    command: String,
    config_hash: String,
    seed: u64,
    outputs: Vec<String>,
    warnings: Vec<String>,
    started: std::time::Instant,
}

impl ManifestBuilder {
    fn new(command: &str, config_doc: &str, seed: u64) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config_hash: sha256_hex(config_doc),
            seed,
            outputs: Vec::new(),
            warnings: Vec::new(),
            started: std::time::Instant::now(),
        }
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_string_lossy().into_owned());
    }

    fn write(self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            git_describe: git_describe(),
            output_paths: self.outputs,
            warnings: self.warnings,
            timings_ms: self.started.elapsed().as_secs_f64() * 1e3,
        };
        std::fs::write(dir.join("run_manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            let (code, kind) = classify(&e);
            let msg = serde_json::json!({ "error": e.to_string(), "kind": kind });
            eprintln!("{msg}");
            std::process::exit(code);
        }
    }
}

fn classify(e: &anyhow::Error) -> (i32, &'static str) {
    if let Some(core) = e.downcast_ref::<CoreError>() {
        return match core {
            CoreError::NonFinite { .. } => (3, "numeric"),
            CoreError::Config(_)
            | CoreError::Invalid { .. }
            | CoreError::Format(_)
            | CoreError::ShapeMismatch { .. }
            | CoreError::Json(_) => (2, "config"),
            CoreError::Io(_) => (1, "io"),
        };
    }
    (1, "runtime")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => gen_data(&config, &out),
        Cmd::PretrainCodec { config, data, out } => pretrain(&config, &data, &out),
        Cmd::Train { config, data, codec, out } => train(&config, &data, &codec, &out),
        Cmd::Infer { ckpt, frame, action, frames, seed, out, guidance, steps, ema, ply } => {
            infer(&ckpt, &frame, &action, frames, seed, &out, guidance, steps, ema, ply)
        }
        Cmd::Eval { ckpt, data, out, ema } => eval(&ckpt, &data, &out, ema),
        Cmd::ExportPointcloud { rgb, depth, intrinsics, out } => {
            export_pointcloud(&rgb, &depth, &intrinsics, &out)
        }
    }
}

fn gen_data(config: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = Config::load(config)?;
    let mut mb = ManifestBuilder::new("gen-data", &serde_json::to_string(&cfg)?, cfg.seed);
    let manifest = fourcast::dataset::write_dataset(out, &cfg)?;
    mb.output(Path::new("manifest.json"));
    for e in &manifest.sequences {
        mb.output(Path::new(&e.dir));
    }
    mb.write(out)
}

/// Deterministic frame order: per sequence, all RGB frames then all
/// replicated depth frames.
fn collect_codec_frames(ds: &Dataset, split: Split) -> anyhow::Result<Vec<Tensor>> {
    let mut frames = Vec::new();
    for idx in ds.indices(split) {
        let seq = ds.load_sequence(idx)?;
        for f in &seq.rgb {
            frames.push(f.clone());
        }
        for d in &seq.depth {
            let (d01, _) = DepthNorm::normalize(d);
            let rep = replicate3(&d01);
            frames.push(Tensor::new(rep.shape[1..].to_vec(), rep.data));
        }
    }
    Ok(frames)
}

fn pretrain(config: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = Config::load(config)?;
    let mut mb = ManifestBuilder::new("pretrain-codec", &serde_json::to_string(&cfg)?, cfg.seed);
    let ds = Dataset::open(data)?;
    let train_frames = collect_codec_frames(&ds, Split::Train)?;
    let val_frames = collect_codec_frames(&ds, Split::Val)?;
    let (codec, report) = pretrain_codec(&cfg.codec, cfg.seed, &train_frames, &val_frames)?;
    save_codec_checkpoint(&codec, &cfg, out)?;
    let out_dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let log_path = out_dir.join("codec_pretrain_log.json");
    std::fs::write(&log_path, serde_json::to_string_pretty(&serde_json::json!({ "eval_mse": report.eval_mse }))? + "\n")?;
    mb.output(out);
    mb.output(&log_path);
    mb.write(&out_dir)
}

fn train(config: &Path, data: &Path, codec_path: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = Config::load(config)?;
    let mut mb = ManifestBuilder::new("train", &serde_json::to_string(&cfg)?, cfg.seed);
    let ds = Dataset::open(data)?;
    let (codec, codec_cfg) = load_codec_checkpoint(codec_path)?;
    let ours = serde_json::to_value(&cfg.codec)?;
    let theirs = serde_json::to_value(&codec_cfg.codec)?;
    if ours != theirs {
        return Err(CoreError::Config(format!(
            "codec checkpoint config {theirs} does not match training config {ours}"
        ))
        .into());
    }
    std::fs::create_dir_all(out)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let mut state = TrainState::new(&cfg, codec)?;
    run_training(&mut state, &ds, Some(out), |step_log| {
        let line = serde_json::to_string(step_log).expect("log line serializes");
        writeln!(log, "{line}").expect("log write");
    })?;
    log.flush()?;
    mb.output(&log_path);
    mb.output(&out.join("ckpt_final.uf4d"));
    mb.write(out)
}

#[allow(clippy::too_many_arguments)]
fn infer(
    ckpt: &Path,
    frame: &Path,
    action: &str,
    frames: Option<usize>,
    seed: u64,
    out: &Path,
    guidance: f64,
    steps: Option<usize>,
    ema: bool,
    ply: bool,
) -> anyhow::Result<()> {
    let state = load_checkpoint(ckpt)?;
    let cfg = &state.config;
    let action = Action::parse(action)?;
    let mut mb = ManifestBuilder::new("infer", &serde_json::to_string(cfg)?, seed);
    if guidance != 1.0 && cfg.train.action_dropout == 0.0 {
        mb.warnings.push(
            "guidance requested but the model was trained without action dropout".to_string(),
        );
    }

    let cond = read_ppm(frame)?;
    let (h, w) = (cfg.data.height, cfg.data.width);
    if cond.shape != [3, h, w] {
        return Err(CoreError::Invalid {
            op: "infer",
            msg: format!("condition frame is {:?}, checkpoint expects [3, {h}, {w}]", cond.shape),
        }
        .into());
    }
    let m = frames.unwrap_or(cfg.data.frames);
    let opts = RolloutOptions {
        guidance_scale: guidance,
        steps: steps.unwrap_or(cfg.diffusion.sample_steps),
    };
    let ema_store = ema.then(|| state.ema.materialize(&state.model.store));
    let products = rollout_from_frame(
        &state.model,
        &state.codec,
        ema_store.as_ref(),
        &cond,
        action.into(),
        m,
        seed,
        &opts,
    )?;

    std::fs::create_dir_all(out)?;
    for (i, rgb) in products.rgb.iter().enumerate() {
        let p = out.join(format!("pred_rgb_{:02}.ppm", i + 1));
        write_ppm(&p, rgb)?;
        mb.output(&p);
    }
    if !products.depth01.is_empty() {
        let meta = DepthMeta::fit(&products.depth01);
        std::fs::write(out.join("depth_meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        mb.output(Path::new("depth_meta.json"));
        for (i, d) in products.depth01.iter().enumerate() {
            let p = out.join(format!("pred_depth_{:02}.pgm", i + 1));
            write_pgm16(&p, &meta.encode(d), h, w)?;
            mb.output(&p);
        }
        if ply {
            let k = Intrinsics::new(cfg.data.focal, cfg.data.focal, w as f64 / 2.0, h as f64 / 2.0)?;
            let mut clouds = Vec::new();
            for (i, (d, rgb)) in products.depth01.iter().zip(&products.rgb).enumerate() {
                // normalized depth spans the visualization range [1, FAR_PLANE]
                let metric = Tensor::new(
                    d.shape.clone(),
                    d.data.iter().map(|&v| 1.0 + v * (FAR_PLANE - 1.0)).collect(),
                );
                clouds.push(backproject(&metric, rgb, &k, i + 1)?);
            }
            let merged = PointCloud::merge(clouds);
            let p = out.join("pred_scene_4d.ply");
            export_ply_merged(&merged, &p)?;
            mb.output(&p);
        }
    }
    mb.write(out)
}

fn eval(ckpt: &Path, data: &Path, out: &Path, ema: bool) -> anyhow::Result<()> {
    let state = load_checkpoint(ckpt)?;
    let cfg = &state.config;
    let mut mb = ManifestBuilder::new("eval", &serde_json::to_string(cfg)?, cfg.seed);
    let ds = Dataset::open(data)?;
    let opts = RolloutOptions { guidance_scale: 1.0, steps: cfg.diffusion.sample_steps };
    let ema_store = ema.then(|| state.ema.materialize(&state.model.store));
    let report = evaluate(&state.model, &state.codec, ema_store.as_ref(), &ds, Split::Val, &opts, cfg.seed)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    mb.output(out);
    mb.write(out.parent().unwrap_or(Path::new(".")))
}

fn numbered_files(dir: &Path, prefix: &str, ext: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with(prefix) && n.ends_with(ext))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn export_pointcloud(rgb: &Path, depth: &Path, intrinsics: &Path, out: &Path) -> anyhow::Result<()> {
    let k_doc = std::fs::read_to_string(intrinsics)?;
    let k: Intrinsics = serde_json::from_str(&k_doc)?;
    let mut mb = ManifestBuilder::new("export-pointcloud", &k_doc, 0);

    let rgb_files = {
        let mut f = numbered_files(rgb, "rgb_", ".ppm")?;
        if f.is_empty() {
            f = numbered_files(rgb, "pred_rgb_", ".ppm")?;
        }
        f
    };
    let depth_files = {
        let mut f = numbered_files(depth, "depth_", ".pgm")?;
        if f.is_empty() {
            f = numbered_files(depth, "pred_depth_", ".pgm")?;
        }
        f
    };
    if rgb_files.is_empty() || rgb_files.len() != depth_files.len() {
        return Err(CoreError::Invalid {
            op: "export-pointcloud",
            msg: format!("{} rgb frames vs {} depth frames", rgb_files.len(), depth_files.len()),
        }
        .into());
    }
    let meta: DepthMeta = serde_json::from_str(&std::fs::read_to_string(depth.join("depth_meta.json"))?)?;

    let mut clouds = Vec::new();
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("scene").to_string();
    let parent = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    for (i, (rp, dp)) in rgb_files.iter().zip(&depth_files).enumerate() {
        let img = read_ppm(rp)?;
        let (vals, h, w) = read_pgm16(dp)?;
        let metric = meta.decode(&vals, h, w);
        let cloud = backproject(&metric, &img, &k, i)?;
        let frame_path = parent.join(format!("{stem}_frame_{i:02}.ply"));
        export_ply_frame(&cloud, &frame_path)?;
        mb.output(&frame_path);
        clouds.push(cloud);
    }
    let merged = PointCloud::merge(clouds);
    export_ply_merged(&merged, out)?;
    mb.output(out);
    mb.write(&parent)
}
