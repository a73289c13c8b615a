//! The four subcommands, callable without spawning a process.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use stsn_core::model::{predict_window, supporting_frame_indices};
use stsn_core::synthvid::{generate_dataset, read_dataset, write_dataset, Clip, ClipConfig};
use stsn_core::train::{evaluate, train, EvalConfig};
use stsn_core::{ModelConfig, Scalar, StsnParams};

use crate::checkpoint::Checkpoint;
use crate::config::{Precision, RunConfig};
use crate::error::CliError;
use crate::viz;

#[derive(Debug, Parser)]
#[command(name = "stsn", version, about = "Spatiotemporal sampling network on synthetic video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus loss CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a grid of K and stride values.
    Eval(EvalArgs),
    /// Export sampling-offset diagnostics for one frame.
    VizOffsets(VizArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub clips: usize,
    #[arg(long, default_value_t = 9)]
    pub frames: usize,
    /// Frame size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.7)]
    pub occlusion_prob: f64,
    #[arg(long, default_value_t = 0.5)]
    pub blur_prob: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// RunConfig TOML; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Train the single-frame baseline (K = 0).
    #[arg(long)]
    pub static_baseline: bool,
    /// Loss CSV path; defaults to the checkpoint path with a `.loss.csv` extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Suppress progress lines on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Supporting frames per side; comma separated for a sweep.
    #[arg(long = "K", value_delimiter = ',', default_value = "2")]
    pub ks: Vec<usize>,
    /// Temporal strides; comma separated for a sweep.
    #[arg(long = "stride", value_delimiter = ',', default_value = "1")]
    pub strides: Vec<usize>,
    /// CSV with one `K,stride,mAP` row per pair.
    #[arg(long)]
    pub report: PathBuf,
    /// Weight-profile CSV; defaults to the report path with a `.weights.csv` extension.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// RunConfig TOML whose `[eval]` table sets the thresholds.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub clip: usize,
    #[arg(long)]
    pub frame: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Supporting frames per side; defaults to the checkpoint's K.
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub object: usize,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    Ok((h, w))
}

pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::VizOffsets(a) => cmd_viz_offsets(&a),
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn main_with_args<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<String, CliError> {
    if a.clips == 0 {
        return Err(CliError::Usage("--clips must be positive".into()));
    }
    let base = ClipConfig {
        frames: a.frames,
        image_h: a.size.0,
        image_w: a.size.1,
        occlusion_prob: a.occlusion_prob,
        blur_prob: a.blur_prob,
        seed: a.seed,
        ..Default::default()
    };
    base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let clips = generate_dataset(&base, a.clips)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(a.out.display(), e))?;
    write_dataset(&clips, &a.out)?;
    let degraded = clips.iter().filter(|c| c.degraded.iter().any(|&d| d)).count();
    Ok(format!(
        "clips={} frames={} degraded={} size={}x{} out={}",
        clips.len(),
        a.frames,
        degraded,
        a.size.0,
        a.size.1,
        a.out.display()
    ))
}

fn load_clips(dir: &Path) -> Result<Vec<Clip>, CliError> {
    let clips = read_dataset(dir)?;
    if clips.is_empty() {
        return Err(CliError::Usage(format!("{}: dataset has no clips", dir.display())));
    }
    Ok(clips)
}

fn check_dims(model: &ModelConfig, clips: &[Clip]) -> Result<(), CliError> {
    for (i, c) in clips.iter().enumerate() {
        if (c.height(), c.width()) != (model.image_h, model.image_w) {
            return Err(CliError::Compat(format!(
                "clip {i} is {}x{}, model expects {}x{}",
                c.height(),
                c.width(),
                model.image_h,
                model.image_w
            )));
        }
    }
    Ok(())
}

/// Writes `iteration,loss` rows.
fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path.display(), e))?;
    let io = |e: csv::Error| CliError::io(path.display(), e);
    w.write_record(["iteration", "loss"]).map_err(io)?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path.display(), e))
}

fn train_as<T: Scalar>(cfg: &RunConfig, clips: &[Clip], quiet: bool) -> Result<(Checkpoint, Vec<f64>), CliError> {
    let params = StsnParams::<T>::init(&cfg.model, cfg.train.seed)?;
    let outcome = train(params, &cfg.model, clips, &cfg.train, |it, loss| {
        if !quiet {
            eprintln!("iteration {it} loss {loss:.6}");
        }
    })?;
    Ok((Checkpoint::from_params(&cfg.model, &outcome.params), outcome.losses))
}

pub fn cmd_train(a: &TrainArgs) -> Result<String, CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.static_baseline {
        cfg.model.support_frames = 0;
        cfg.train.support_frames = 0;
    }
    cfg.validate()?;
    let mut clips = load_clips(&a.data)?;
    if let Some(n) = cfg.data.max_clips {
        clips.truncate(n);
    }
    check_dims(&cfg.model, &clips)?;
    let (ckpt, losses) = match cfg.data.precision {
        Precision::F32 => train_as::<f32>(&cfg, &clips, a.quiet)?,
        Precision::F64 => train_as::<f64>(&cfg, &clips, a.quiet)?,
    };
    ckpt.save(&a.out)?;
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_loss_csv(&loss_path, &losses)?;
    Ok(format!(
        "trained {} iterations (K_train={}) final_loss={:.6} ckpt={} losses={}",
        cfg.train.iterations,
        cfg.train.support_frames,
        losses.last().copied().unwrap_or(f64::NAN),
        a.out.display(),
        loss_path.display()
    ))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String, CliError> {
    if a.ks.is_empty() || a.strides.is_empty() {
        return Err(CliError::Usage("--K and --stride need at least one value".into()));
    }
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?.eval,
        None => EvalConfig::default(),
    };
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let params: StsnParams<f64> = ckpt.to_params()?;
    let clips = load_clips(&a.data)?;
    check_dims(&ckpt.config, &clips)?;

    let report_io = |e: csv::Error| CliError::io(a.report.display(), e);
    let mut report = csv::Writer::from_path(&a.report).map_err(report_io)?;
    report.write_record(["K", "stride", "mAP"]).map_err(report_io)?;
    let weights_path = a.weights.clone().unwrap_or_else(|| a.report.with_extension("weights.csv"));
    let weights_io = |e: csv::Error| CliError::io(weights_path.display(), e);
    let mut weights = csv::Writer::from_path(&weights_path).map_err(weights_io)?;
    weights.write_record(["K", "stride", "k", "mean_weight"]).map_err(weights_io)?;

    let mut lines = Vec::new();
    for &k in &a.ks {
        for &stride in &a.strides {
            let ec = EvalConfig {
                support_frames: k,
                temporal_stride: stride,
                ..base.clone()
            };
            ec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let r = evaluate(&params, &ckpt.config, &clips, &ec)?;
            report
                .write_record([k.to_string(), stride.to_string(), r.map.to_string()])
                .map_err(report_io)?;
            for (pos, w) in r.weight_profile.iter().enumerate() {
                let rel = pos as isize - k as isize;
                weights
                    .write_record([k.to_string(), stride.to_string(), rel.to_string(), w.to_string()])
                    .map_err(weights_io)?;
            }
            lines.push(format!("K={k} stride={stride} mAP={:.4}", r.map));
        }
    }
    report.flush().map_err(|e| CliError::io(a.report.display(), e))?;
    weights.flush().map_err(|e| CliError::io(weights_path.display(), e))?;
    Ok(lines.join("\n"))
}

pub fn cmd_viz_offsets(a: &VizArgs) -> Result<String, CliError> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let params: StsnParams<f64> = ckpt.to_params()?;
    let clips = load_clips(&a.data)?;
    let clip = clips
        .get(a.clip)
        .ok_or_else(|| CliError::Range(format!("clip {} of {}", a.clip, clips.len())))?;
    if a.frame >= clip.len() {
        return Err(CliError::Range(format!("frame {} of {}", a.frame, clip.len())));
    }
    let gt = clip.boxes[a.frame]
        .get(a.object)
        .ok_or_else(|| CliError::Range(format!("object {} of {}", a.object, clip.boxes[a.frame].len())))?;
    check_dims(&ckpt.config, std::slice::from_ref(clip))?;
    let model = ModelConfig {
        support_frames: a.k.unwrap_or(ckpt.config.support_frames),
        ..ckpt.config.clone()
    };
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let frames = clip.frame_tensors::<f64>();
    let indices = supporting_frame_indices(a.frame, model.support_frames, model.temporal_stride, clip.len());
    let pred = predict_window(&frames, &indices, &model, &params, 1.0)?;
    let (i, j) = stsn_core::train::center_cell(&gt.bbox, &model);
    let (ref_y, ref_x) = gt.bbox.center();
    let stride = model.head_stride as f64;

    fs::create_dir_all(&a.out).map_err(|e| CliError::io(a.out.display(), e))?;
    let csv_path = a.out.join("offsets.csv");
    let csv_io = |e: csv::Error| CliError::io(csv_path.display(), e);
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_io)?;
    w.write_record(["k", "ref_y", "ref_x", "mean_dy", "mean_dx"]).map_err(csv_io)?;
    for (pos, (&frame, field)) in indices.iter().zip(&pred.offsets).enumerate() {
        let k = pos as isize - model.support_frames as isize;
        let (dy, dx) = field.mean_at(i, j);
        let (dy, dx) = (dy * stride, dx * stride);
        w.write_record([k.to_string(), ref_y.to_string(), ref_x.to_string(), dy.to_string(), dx.to_string()])
            .map_err(csv_io)?;
        let image = viz::render(&clip.frame::<f64>(frame), (ref_y, ref_x), (ref_y + dy, ref_x + dx));
        viz::write_ppm(&image, &a.out.join(format!("offsets_k{k:+}.ppm")))?;
    }
    w.flush().map_err(|e| CliError::io(csv_path.display(), e))?;
    Ok(format!(
        "wrote {} supporting-frame images and offsets.csv to {}",
        indices.len(),
        a.out.display()
    ))
}
