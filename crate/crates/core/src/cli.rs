//! Command-line front end: scene generation, training, evaluation,
//! benchmarks and the gradient-check suite.

use crate::error::{Error, Result};
use crate::metrics::{write_curve_csv, EvalConfig};
use crate::synthdata::{generate_corpus, read_scene_dir, write_scene, Image, Scene};
use crate::toytrain::checkpoint;
use crate::toytrain::cost::{detection_macs, keypoint_macs, measure_head_scaling, DetectionMacs, HeadScaling};
use crate::toytrain::gradcheck::{end_to_end, loss_suite, op_suite, CheckReport};
use crate::toytrain::infer::{evaluate, DetectConfig, EvalSummary};
use crate::toytrain::kernels;
use crate::toytrain::model::{ToyMaskFace, ToyModelConfig};
use crate::toytrain::train::{train_toy, write_trace_csv, TrainConfig, TrainStatus};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidBox { .. } => EXIT_CONFIG,
        Error::Io(_) | Error::Format { .. } | Error::Json(_) => EXIT_IO,
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "maskkit", version, about = "Toy multi-task face and landmark detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene corpus (PPM images with JSON annotations).
    Gen(GenArgs),
    /// Train the toy model on a scene directory.
    Train(TrainArgs),
    /// Evaluate a trained model on a scene directory.
    Eval(EvalArgs),
    /// Time kernels and report the keypoint head's per-proposal cost.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON file with `model`, `train`, `detect` and `eval` override sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub scenes: usize,
    #[arg(long, default_value_t = 160)]
    pub image_size: usize,
    #[arg(long, default_value_t = 3)]
    pub max_faces: usize,
    #[arg(long, default_value_t = 20.0)]
    pub min_face: f64,
    #[arg(long, default_value_t = 60.0)]
    pub max_face: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scene directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Augmentation and scene-order seed; also the init seed unless overridden.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lambda_kp: Option<f64>,
    #[arg(long)]
    pub k0: Option<i32>,
    /// Training crop side.
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub k0: Option<i32>,
    /// Fuse the {0.5, 1, 2} image pyramid.
    #[arg(long)]
    pub multi_scale: bool,
    /// Fuse horizontally mirrored views.
    #[arg(long)]
    pub flip: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 160)]
    pub image_size: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per operator and loss.
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
}

/// Optional configuration sections read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub model: Option<ToyModelConfig>,
    pub train: Option<TrainConfig>,
    pub detect: Option<DetectConfig>,
    pub eval: Option<EvalConfig>,
}

impl Overrides {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// A fully resolved and validated invocation.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum RunConfig {
    Gen {
        out_dir: PathBuf,
        seed: u64,
        scenes: usize,
        image_size: usize,
        max_faces: usize,
        face_range: (f64, f64),
    },
    Train {
        out_dir: PathBuf,
        data: PathBuf,
        model: ToyModelConfig,
        train: TrainConfig,
    },
    Eval {
        out_dir: PathBuf,
        data: PathBuf,
        model: PathBuf,
        detect: DetectConfig,
        eval: EvalConfig,
    },
    Bench {
        out_dir: PathBuf,
        seed: u64,
        image_size: usize,
        repeats: usize,
        model: ToyModelConfig,
    },
    Gradcheck {
        out_dir: PathBuf,
        seed: u64,
        instances: usize,
    },
}

impl RunConfig {
    /// Merge flags over `--config` sections and validate the result.
    pub fn resolve(cli: Cli) -> Result<Self> {
        let cfg = match cli.command {
            Command::Gen(a) => {
                Overrides::load(a.common.config.as_deref())?;
                if a.image_size < 32 || a.scenes == 0 || !(a.min_face > 0.0 && a.min_face <= a.max_face) {
                    return Err(Error::Config(format!(
                        "gen needs image size >= 32, scenes > 0 and 0 < min face <= max face (got {}, {}, {}..{})",
                        a.image_size, a.scenes, a.min_face, a.max_face
                    )));
                }
                RunConfig::Gen {
                    out_dir: a.common.out_dir,
                    seed: a.seed,
                    scenes: a.scenes,
                    image_size: a.image_size,
                    max_faces: a.max_faces,
                    face_range: (a.min_face, a.max_face),
                }
            }
            Command::Train(a) => {
                let o = Overrides::load(a.common.config.as_deref())?;
                let mut model = o.model.unwrap_or_default();
                let mut train = o.train.unwrap_or_default();
                train.seed = a.seed;
                model.init_seed = a.init_seed.unwrap_or(a.seed);
                if let Some(s) = a.steps {
                    train.steps = s;
                }
                if let Some(l) = a.lambda_kp {
                    train.loss.lambda_kp = l;
                }
                if let Some(k) = a.k0 {
                    train.k0 = k;
                }
                if let Some(n) = a.image_size {
                    model.input_size = n;
                }
                train.augment.crop_size = model.input_size;
                model.validate()?;
                train.validate()?;
                RunConfig::Train { out_dir: a.common.out_dir, data: a.data, model, train }
            }
            Command::Eval(a) => {
                let o = Overrides::load(a.common.config.as_deref())?;
                let model = a.model.ok_or_else(|| Error::Config("eval needs --model <checkpoint>".into()))?;
                let mut detect = o.detect.unwrap_or_default();
                detect.multi_scale |= a.multi_scale;
                detect.flip |= a.flip;
                if let Some(k) = a.k0 {
                    detect.k0 = k;
                }
                let eval = o.eval.unwrap_or_default();
                eval.validate()?;
                if !(0.0..1.0).contains(&detect.score_thresh) || detect.scales.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::Config(format!("invalid detection settings {detect:?}")));
                }
                RunConfig::Eval { out_dir: a.common.out_dir, data: a.data, model, detect, eval }
            }
            Command::Bench(a) => {
                let o = Overrides::load(a.common.config.as_deref())?;
                let model = o.model.unwrap_or_default();
                model.validate()?;
                if a.image_size < 64 || a.repeats == 0 {
                    return Err(Error::Config("bench needs image size >= 64 and repeats > 0".into()));
                }
                RunConfig::Bench { out_dir: a.common.out_dir, seed: a.seed, image_size: a.image_size, repeats: a.repeats, model }
            }
            Command::Gradcheck(a) => {
                Overrides::load(a.common.config.as_deref())?;
                if a.instances == 0 {
                    return Err(Error::Config("gradcheck needs at least one instance".into()));
                }
                RunConfig::Gradcheck { out_dir: a.common.out_dir, seed: a.seed, instances: a.instances }
            }
        };
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    steps_run: usize,
    status: String,
    skipped_steps: usize,
    first_loss: f64,
    final_window_loss: f64,
    trainable_parameters: usize,
}

#[derive(Debug, Serialize)]
struct DetectionRecord<'a> {
    image_id: &'a str,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
    landmarks: &'a [(f64, f64)],
}

#[derive(Debug, Serialize)]
struct OpTiming {
    op: String,
    shape: String,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    threads: usize,
    image_size: usize,
    detection_macs: DetectionMacs,
    detection_macs_total: u64,
    keypoint_macs_per_proposal: u64,
    mac_ratio: f64,
    head_scaling: HeadScaling,
    time_ratio: f64,
    ops: Vec<OpTiming>,
}

fn time_it(repeats: usize, mut f: impl FnMut()) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let t = Instant::now();
        f();
        best = best.min(t.elapsed().as_secs_f64());
    }
    best
}

fn op_timings(repeats: usize) -> Vec<OpTiming> {
    let (c, h, w) = (16, 40, 40);
    let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect();
    let w3 = vec![0.01; c * c * 9];
    let w1 = vec![0.01; c * c];
    let wt = vec![0.01; c * 5 * 16];
    let bias = vec![0.0; c];
    let g = vec![1.0; c * h * w];
    let shape = format!("{c}x{h}x{w}");
    vec![
        OpTiming { op: "conv3x3".into(), shape: shape.clone(), seconds: time_it(repeats, || drop(kernels::conv2d(&x, c, h, w, &w3, &bias, c, 3))) },
        OpTiming {
            op: "conv3x3_backward".into(),
            shape: shape.clone(),
            seconds: time_it(repeats, || drop(kernels::conv2d_backward(&x, c, h, w, &w3, c, 3, &g, true))),
        },
        OpTiming { op: "conv1x1".into(), shape: shape.clone(), seconds: time_it(repeats, || drop(kernels::conv2d(&x, c, h, w, &w1, &bias, c, 1))) },
        OpTiming {
            op: "conv_transpose4x4".into(),
            shape: format!("{c}x14x14"),
            seconds: time_it(repeats, || drop(kernels::conv_transpose4(&x[..c * 196], c, 14, 14, &wt, &bias[..5], 5))),
        },
        OpTiming { op: "maxpool2".into(), shape: shape.clone(), seconds: time_it(repeats, || drop(kernels::maxpool2(&x, c, h, w))) },
        OpTiming { op: "bilinear2x".into(), shape, seconds: time_it(repeats, || drop(kernels::bilinear2x(&x, c, h, w))) },
    ]
}

fn gen(out_dir: &Path, seed: u64, scenes: usize, size: usize, max_faces: usize, range: (f64, f64)) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir)?;
    let corpus = generate_corpus(seed, scenes, size, max_faces, range)?;
    let width = scenes.saturating_sub(1).to_string().len().max(5);
    let mut lines = Vec::new();
    for (i, scene) in corpus.iter().enumerate() {
        write_scene(out_dir, &format!("scene_{i:0width$}"), scene)?;
    }
    let faces: usize = corpus.iter().map(|s| s.faces.len()).sum();
    lines.push(format!("wrote {} scenes with {faces} faces to {}", corpus.len(), out_dir.display()));
    Ok(lines)
}

fn load_scenes(data: &Path) -> Result<Vec<(String, Scene)>> {
    let scenes = read_scene_dir(data)?;
    if scenes.is_empty() {
        return Err(Error::Config(format!("no scenes found in {}", data.display())));
    }
    Ok(scenes)
}

/// Execute a resolved configuration, returning lines for the terminal.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Vec<String>> {
    match cfg {
        RunConfig::Gen { out_dir, seed, scenes, image_size, max_faces, face_range } => {
            gen(out_dir, *seed, *scenes, *image_size, *max_faces, *face_range)
        }
        RunConfig::Train { out_dir, data, model, train } => {
            let scenes: Vec<Scene> = load_scenes(data)?.into_iter().map(|(_, s)| s).collect();
            fs::create_dir_all(out_dir)?;
            let mut net = ToyMaskFace::new(model.clone())?;
            let outcome = train_toy(&mut net, &scenes, train)?;
            let mut w = create(&out_dir.join("loss_trace.csv"))?;
            write_trace_csv(&mut w, &outcome.trace)?;
            w.flush()?;
            let tail = &outcome.trace[outcome.trace.len().saturating_sub(100)..];
            let summary = TrainSummary {
                steps_run: outcome.trace.len(),
                status: match outcome.status {
                    TrainStatus::Completed => "completed".into(),
                    TrainStatus::Diverged { .. } => "diverged".into(),
                },
                skipped_steps: outcome.trace.iter().filter(|r| r.skipped).count(),
                first_loss: outcome.trace[0].l_total,
                final_window_loss: tail.iter().map(|r| r.l_total).sum::<f64>() / tail.len() as f64,
                trainable_parameters: net.params.num_trainable(),
            };
            write_json(&out_dir.join("train_summary.json"), &summary)?;
            outcome.clone().into_result()?;
            checkpoint::save(&out_dir.join("model.ckpt"), &net)?;
            Ok(vec![format!(
                "trained {} steps on {} scenes; loss {:.4} -> {:.4}; wrote {}",
                summary.steps_run,
                scenes.len(),
                summary.first_loss,
                summary.final_window_loss,
                out_dir.join("model.ckpt").display()
            )])
        }
        RunConfig::Eval { out_dir, data, model, detect, eval } => {
            let net = checkpoint::load(model)?;
            let named = load_scenes(data)?;
            let scenes: Vec<Scene> = named.iter().map(|(_, s)| s.clone()).collect();
            fs::create_dir_all(out_dir)?;
            let out = evaluate(&net, &scenes, detect, eval)?;
            let mut w = create(&out_dir.join("detections.jsonl"))?;
            for ((id, _), dets) in named.iter().zip(&out.detections) {
                for d in dets {
                    let rec = DetectionRecord {
                        image_id: id,
                        x1: d.bbox.x1,
                        y1: d.bbox.y1,
                        x2: d.bbox.x2,
                        y2: d.bbox.y2,
                        score: d.score,
                        landmarks: &d.landmarks,
                    };
                    serde_json::to_writer(&mut w, &rec)?;
                    w.write_all(b"\n")?;
                }
            }
            w.flush()?;
            write_json(&out_dir.join("summary.json"), &out.summary)?;
            let mut w = create(&out_dir.join("pr_curve.csv"))?;
            write_curve_csv(&mut w, ("recall", "precision"), &out.pr_curve)?;
            w.flush()?;
            let mut w = create(&out_dir.join("ced_curve.csv"))?;
            write_curve_csv(&mut w, ("nme", "fraction"), &out.ced_curve)?;
            w.flush()?;
            Ok(vec![summary_line(&out.summary)])
        }
        RunConfig::Bench { out_dir, seed, image_size, repeats, model } => {
            fs::create_dir_all(out_dir)?;
            let net = ToyMaskFace::new(ToyModelConfig { init_seed: *seed, ..model.clone() })?;
            let det = detection_macs(model, *image_size, *image_size);
            let kp = keypoint_macs(model);
            let img = Image::new(*image_size, *image_size);
            let scaling = measure_head_scaling(&net, &img, &[0, 8, 16, 32, 64], *repeats, crate::geometry::DEFAULT_K0)?;
            let report = BenchReport {
                threads: kernels::thread_count(),
                image_size: *image_size,
                detection_macs: det,
                detection_macs_total: det.total(),
                keypoint_macs_per_proposal: kp,
                mac_ratio: kp as f64 / det.total() as f64,
                time_ratio: scaling.time_ratio(),
                head_scaling: scaling,
                ops: op_timings(*repeats),
            };
            write_json(&out_dir.join("bench.json"), &report)?;
            let mut lines = vec![
                format!("detection path     {:>12} MACs", report.detection_macs_total),
                format!("keypoint head      {:>12} MACs per proposal ({:.2}%)", kp, 100.0 * report.mac_ratio),
                format!(
                    "measured           {:.3} ms dense, {:.3} ms per proposal ({:.2}%, r^2 {:.3})",
                    1e3 * report.head_scaling.dense_seconds,
                    1e3 * report.head_scaling.seconds_per_proposal,
                    100.0 * report.time_ratio,
                    report.head_scaling.r_squared
                ),
            ];
            lines.extend(report.ops.iter().map(|o| format!("{:<20} {:<10} {:.3} ms", o.op, o.shape, 1e3 * o.seconds)));
            Ok(lines)
        }
        RunConfig::Gradcheck { out_dir, seed, instances } => {
            fs::create_dir_all(out_dir)?;
            let mut reports: Vec<CheckReport> = op_suite(*seed, *instances)?;
            reports.extend(loss_suite(seed.wrapping_add(1), *instances)?);
            let e2e = (0..3).map(|s| end_to_end(seed.wrapping_add(s), 12)).collect::<Result<Vec<f64>>>()?;
            reports.push(CheckReport { name: "end_to_end".into(), instances: e2e.len(), max_rel_err: e2e.iter().copied().fold(0.0, f64::max) });
            write_json(&out_dir.join("gradcheck.json"), &reports)?;
            let mut lines = vec![format!("{:<22} {:>9}  {:>12}  {:>8}", "check", "instances", "max rel err", "bound")];
            let mut failed = Vec::new();
            for r in &reports {
                let bound = if r.name == "end_to_end" { 1e-3 } else { 1e-4 };
                lines.push(format!("{:<22} {:>9}  {:>12.3e}  {:>8.0e}", r.name, r.instances, r.max_rel_err, bound));
                if !(r.max_rel_err < bound) {
                    failed.push(r.name.clone());
                }
            }
            if failed.is_empty() {
                Ok(lines)
            } else {
                for l in &lines {
                    println!("{l}");
                }
                Err(Error::UndefinedMetric(format!("gradient checks above bound: {}", failed.join(", "))))
            }
        }
    }
}

fn summary_line(s: &EvalSummary) -> String {
    format!(
        "{} images, {} faces: AP@0.5 {:.4}, mean NME {:.4} over {} faces, CED@0.95 {:.4}",
        s.images, s.faces, s.ap50, s.nme_mean, s.faces_with_landmarks, s.ced95
    )
}

/// Parse, resolve and run; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match RunConfig::resolve(cli).and_then(|cfg| run_pipeline(&cfg)) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
