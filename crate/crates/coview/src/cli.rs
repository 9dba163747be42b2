//! The `coview` command line: dataset generation, two-stage training,
//! evaluation and plot emission, each writing a `run.json` with the fully
//! resolved configuration for reproducibility.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 data-integrity
//! error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint;
use crate::domain::Problem;
use crate::error::Error;
use crate::evalrun;
use crate::matchnet::{JointModel, MatchConfig, ReweightMode};
use crate::metrics::EvalReport;
use crate::plot::{csv_two_columns, line_chart_svg, Series};
use crate::segnet::{build_network, SegNetConfig};
use crate::synthdata::{
    export_dataset, generate_benchmark, import_dataset, sample_pairs, BenchmarkConfig, Dataset,
    Split,
};
use crate::trainer::{train_fcn_stage, train_joint_stage, Stage, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProblemArg {
    #[value(name = "third-third")]
    ThirdThird,
    #[value(name = "third-first")]
    ThirdFirst,
}

impl From<ProblemArg> for Problem {
    fn from(p: ProblemArg) -> Problem {
        match p {
            ProblemArg::ThirdThird => Problem::ThirdThird,
            ProblemArg::ThirdFirst => Problem::ThirdFirst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Fcn,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReweightArg {
    None,
    #[value(name = "soft-attention")]
    SoftAttention,
    #[value(name = "bounding-box")]
    BoundingBox,
}

impl From<ReweightArg> for ReweightMode {
    fn from(r: ReweightArg) -> ReweightMode {
        match r {
            ReweightArg::None => ReweightMode::None,
            ReweightArg::SoftAttention => ReweightMode::SoftAttention,
            ReweightArg::BoundingBox => ReweightMode::BoundingBox,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "coview",
    about = "Joint person segmentation and cross-view identification on a synthetic multi-view benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it with its manifest.
    Gen(GenArgs),
    /// Train the segmentation stage or the joint model.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write an evaluation report.
    Eval(EvalArgs),
    /// Emit SVG/CSV curves and mask overlays from a report.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// JSON benchmark configuration; defaults come from the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long, value_enum, default_value = "third-third")]
    problem: ProblemArg,
    /// Dataset directory (from `gen`).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Stage-(a) checkpoint to initialize from (required for --stage joint).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// JSON file with a full TrainConfig; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial joint epochs with the FCN branch frozen.
    #[arg(long)]
    frozen_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    samples_per_epoch: Option<usize>,
    /// Re-weighting mode of the matching head (joint stage).
    #[arg(long, value_enum, default_value = "soft-attention")]
    reweight: ReweightArg,
    /// Per-epoch checkpoints besides the final one.
    #[arg(long, default_value_t = false)]
    epoch_checkpoints: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    problem: ProblemArg,
    #[arg(long)]
    report: PathBuf,
    /// Predictions directory; defaults next to the report.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Evaluate this split.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Parameter(_)
        | Error::Config(_)
        | Error::Shape { .. }
        | Error::Generation { .. }
        | Error::Checkpoint(_) => 2,
        Error::UnknownView(_)
        | Error::Integrity(_)
        | Error::EmptyDataset(_)
        | Error::Io { .. }
        | Error::Image { .. }
        | Error::Json { .. } => 3,
    }
}

fn write_run_json<T: Serialize>(dir: &Path, payload: &T) -> crate::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("run.json");
    let json = serde_json::to_string_pretty(payload).expect("run config serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> crate::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn init_threads() {
    if let Ok(v) = std::env::var("COVIEW_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn run_gen(args: &GenArgs) -> crate::Result<()> {
    let mut config = match &args.config {
        Some(path) => read_json_file::<BenchmarkConfig>(path)?,
        None => BenchmarkConfig::desk(args.seed),
    };
    config.seed = args.seed;
    let scenes = generate_benchmark(&config)?;
    export_dataset(&scenes, &args.out)?;

    #[derive(Serialize)]
    struct RunInfo<'a> {
        command: &'a str,
        seed: u64,
        preset: &'a str,
        config: &'a BenchmarkConfig,
    }
    write_run_json(
        &args.out,
        &RunInfo {
            command: "gen",
            seed: args.seed,
            preset: if args.preset == Preset::Desk { "desk" } else { "paper" },
            config: &config,
        },
    )?;
    println!(
        "wrote {} scenes ({} train / {} test) to {}",
        config.scenes,
        config.train_scenes,
        config.scenes - config.train_scenes,
        args.out.display()
    );
    Ok(())
}

fn seg_config_for(preset: Preset, dataset: &Dataset) -> crate::Result<SegNetConfig> {
    let first = dataset
        .scenes
        .first()
        .and_then(|s| s.views.first())
        .and_then(|v| v.frames.first())
        .ok_or_else(|| Error::EmptyDataset("dataset has no frames".into()))?;
    Ok(match preset {
        Preset::Desk => SegNetConfig::desk(first.width, first.height),
        Preset::Paper => SegNetConfig::paper(first.width, first.height),
    })
}

fn run_train(args: &TrainArgs) -> crate::Result<()> {
    let dataset = import_dataset(&args.data)?;
    let problem: Problem = args.problem.into();

    let mut cfg = match &args.config {
        Some(path) => read_json_file::<TrainConfig>(path)?,
        None => match (args.stage, args.preset) {
            (StageArg::Fcn, Preset::Desk) => TrainConfig::desk_fcn(args.seed),
            (StageArg::Fcn, Preset::Paper) => TrainConfig::paper_fcn(args.seed),
            (StageArg::Joint, Preset::Desk) => TrainConfig::desk_joint(args.seed, problem),
            (StageArg::Joint, Preset::Paper) => TrainConfig::paper_joint(args.seed, problem),
        },
    };
    cfg.seed = args.seed;
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
        // Keep the default freeze fraction meaningful on shortened runs.
        if args.frozen_epochs.is_none() && cfg.frozen_epochs > epochs {
            cfg.frozen_epochs = epochs / 3;
        }
    }
    if let Some(frozen) = args.frozen_epochs {
        cfg.frozen_epochs = frozen;
    }
    if let Some(batch) = args.batch_size {
        cfg.batch_size = batch;
    }
    if let Some(cap) = args.samples_per_epoch {
        cfg.samples_per_epoch = Some(cap);
    }
    if args.epoch_checkpoints {
        cfg.checkpoint_dir = Some(args.out.clone());
    }
    if args.stage == StageArg::Joint && args.init.is_none() {
        return Err(Error::Config(
            "joint training starts from a stage-(a) checkpoint: pass --init <fcn checkpoint>".into(),
        ));
    }
    cfg.validate()?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    #[derive(Serialize)]
    struct RunInfo<'a> {
        command: &'a str,
        stage: &'a str,
        problem: String,
        seed: u64,
        data: String,
        init: Option<String>,
        config: &'a TrainConfig,
    }
    let run_info = RunInfo {
        command: "train",
        stage: if args.stage == StageArg::Fcn { "fcn" } else { "joint" },
        problem: problem.to_string(),
        seed: args.seed,
        data: args.data.display().to_string(),
        init: args.init.as_ref().map(|p| p.display().to_string()),
        config: &cfg,
    };
    write_run_json(&args.out, &run_info)?;

    match args.stage {
        StageArg::Fcn => {
            cfg.stage = Stage::Fcn;
            let net = match &args.init {
                Some(path) => checkpoint::load_segnet(path)?,
                None => {
                    let seg_cfg = seg_config_for(args.preset, &dataset)?;
                    build_network(&seg_cfg, args.seed)?
                }
            };
            let history = train_fcn_stage(&net, &dataset, &cfg)?;
            let final_path = args.out.join("fcn_final.cvck");
            checkpoint::save_segnet(&final_path, &net, history.epochs.last().map(|e| e.epoch))?;
            let log = serde_json::to_string_pretty(&history).expect("history serializes");
            std::fs::write(args.out.join("training_log.json"), log)
                .map_err(|e| Error::io(&args.out, e))?;
            println!(
                "stage (a) done: {} epochs, final mean loss {:.3}, checkpoint {}",
                history.epochs.len(),
                history.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN),
                final_path.display()
            );
        }
        StageArg::Joint => {
            cfg.stage = Stage::Joint;
            cfg.problem = Some(problem);
            let init = args.init.as_ref().ok_or_else(|| {
                Error::Config(
                    "joint training starts from a stage-(a) checkpoint: pass --init <fcn checkpoint>"
                        .into(),
                )
            })?;
            let segnet = checkpoint::load_segnet(init)?;
            let mut match_cfg = MatchConfig::desk(problem, &segnet.config);
            match_cfg.reweight_mode = args.reweight.into();
            let model = JointModel::from_segnet(segnet, &match_cfg, args.seed)?;
            let pairs = sample_pairs(&dataset, problem, cfg.neg_ratio, cfg.seed, Some(Split::Train))?;
            let history = train_joint_stage(&model, &dataset, &pairs, &cfg)?;
            let final_path = args.out.join("joint_final.cvck");
            checkpoint::save_joint(&final_path, &model, history.epochs.last().map(|e| e.epoch))?;
            let log = serde_json::to_string_pretty(&history).expect("history serializes");
            std::fs::write(args.out.join("training_log.json"), log)
                .map_err(|e| Error::io(&args.out, e))?;
            println!(
                "stage (b) done: {} epochs over {} pairs, checkpoint {}",
                history.epochs.len(),
                pairs.len(),
                final_path.display()
            );
        }
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> crate::Result<()> {
    let dataset = import_dataset(&args.data)?;
    let problem: Problem = args.problem.into();
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("unknown split {other}"))),
    };
    let model = checkpoint::load_model_for_eval(&args.ckpt, problem)?;

    let mut report = evalrun::evaluate(
        &model,
        &dataset,
        split,
        problem,
        &args.ckpt.display().to_string(),
        &args.data.display().to_string(),
    )?;

    let predictions = args
        .predictions
        .clone()
        .unwrap_or_else(|| args.report.with_extension("predictions"));
    evalrun::write_predictions(&model, &dataset, split, &predictions)?;
    report.predictions_dir = Some(predictions.display().to_string());
    report.dataset_root = Some(args.data.display().to_string());

    if let Some(parent) = args.report.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&args.report, json).map_err(|e| Error::io(&args.report, e))?;

    if let Some(dir) = args.report.parent() {
        #[derive(Serialize)]
        struct RunInfo<'a> {
            command: &'a str,
            ckpt: String,
            data: String,
            problem: String,
            split: &'a str,
        }
        write_run_json(
            dir,
            &RunInfo {
                command: "eval",
                ckpt: args.ckpt.display().to_string(),
                data: args.data.display().to_string(),
                problem: problem.to_string(),
                split: &args.split,
            },
        )?;
    }
    println!(
        "IoU {:.4}  mAP {:.4}  ACC {:.4}  (report {})",
        report.mean_iou,
        report.map,
        report.acc,
        args.report.display()
    );
    Ok(())
}

fn overlay_predictions(report: &EvalReport, out: &Path) -> crate::Result<usize> {
    let (Some(pred_dir), Some(data_root)) = (&report.predictions_dir, &report.dataset_root) else {
        return Ok(0);
    };
    let pred_dir = PathBuf::from(pred_dir);
    let data_root = PathBuf::from(data_root);
    if !pred_dir.exists() || !data_root.exists() {
        return Ok(0);
    }
    let overlays = out.join("overlays");
    std::fs::create_dir_all(&overlays).map_err(|e| Error::io(&overlays, e))?;
    let mut written = 0usize;
    let entries = std::fs::read_dir(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    for name in names {
        // scene_SSS_view_VV_id_II_t_TTT.png
        let parts: Vec<&str> = name.trim_end_matches(".png").split('_').collect();
        if parts.len() != 8 {
            continue;
        }
        let (scene, view, t) = (parts[1], parts[3], parts[7]);
        let frame_path = data_root
            .join(format!("scene_{scene}"))
            .join(format!("view_{view}"))
            .join(format!("frame_{t}.png"));
        if !frame_path.exists() {
            continue;
        }
        let frame = image::open(&frame_path)
            .map_err(|e| Error::Image {
                path: frame_path.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let mask = image::open(pred_dir.join(&name))
            .map_err(|e| Error::Image {
                path: pred_dir.join(&name),
                message: e.to_string(),
            })?
            .to_luma8();
        let mut out_img = frame.clone();
        for (px, m) in out_img.pixels_mut().zip(mask.pixels()) {
            if m.0[0] > 0 {
                px.0[0] = ((px.0[0] as u16 + 255) / 2) as u8;
                px.0[1] /= 2;
                px.0[2] /= 2;
            }
        }
        let path = overlays.join(&name);
        out_img.save(&path).map_err(|e| Error::Image {
            path,
            message: e.to_string(),
        })?;
        written += 1;
    }
    Ok(written)
}

fn run_plot(args: &PlotArgs) -> crate::Result<()> {
    let report: EvalReport = read_json_file(&args.report)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let iou_points: Vec<(f64, f64)> = report
        .iou_by_frame
        .iter()
        .enumerate()
        .map(|(t, &v)| (t as f64 + 1.0, v))
        .collect();
    let svg = line_chart_svg(
        &format!("IoU vs sequence length ({})", report.problem),
        "frames",
        "IoU",
        &[Series {
            name: report.model.clone(),
            points: iou_points.clone(),
        }],
    );
    std::fs::write(args.out.join("iou_vs_length.svg"), svg)
        .map_err(|e| Error::io(&args.out, e))?;
    std::fs::write(
        args.out.join("iou_vs_length.csv"),
        csv_two_columns(("frames", "iou"), &iou_points),
    )
    .map_err(|e| Error::io(&args.out, e))?;

    let pr_points: Vec<(f64, f64)> = report.pr.iter().map(|&(p, r)| (r, p)).collect();
    let svg = line_chart_svg(
        &format!("Precision-recall ({})", report.problem),
        "recall",
        "precision",
        &[Series {
            name: report.model.clone(),
            points: pr_points.clone(),
        }],
    );
    std::fs::write(args.out.join("pr_curve.svg"), svg).map_err(|e| Error::io(&args.out, e))?;
    std::fs::write(
        args.out.join("pr_curve.csv"),
        csv_two_columns(("recall", "precision"), &pr_points),
    )
    .map_err(|e| Error::io(&args.out, e))?;

    let overlays = overlay_predictions(&report, &args.out)?;
    println!(
        "wrote curves and {overlays} overlay frames to {}",
        args.out.display()
    );
    Ok(())
}

/// Parse argv and run. Returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_threads();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Gen(args) => run_gen(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Plot(args) => run_plot(args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
