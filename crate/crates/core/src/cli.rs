//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 missing model, empty
//! training set, unknown frame or bad usage, 3 malformed input or missing
//! calibration for a frame.
//!
//! Settings resolve as flags, then the config file (`--config` or
//! `MMLF_CONFIG`), then built-in defaults.

use crate::eval::{self, EvalReport, Interp, Metric};
use crate::fusion_net::{load_checkpoint, save_checkpoint, ModelParams};
use crate::kitti_io::{self, ClassList, KittiObject, RunConfig};
use crate::par::{self, Execution};
use crate::pipeline::{self, FrameInput, TrainingFrame};
use crate::plot::{self, PlotBox};
use clap::{Args, Parser, Subcommand};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "mmlf",
    version,
    about = "Late fusion of 2D and 3D detections with evidential uncertainty"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse detector outputs into scored 3D detections with uncertainty.
    Fuse(FuseArgs),
    /// Train the evidence heads and pair scorer.
    Train(TrainArgs),
    /// Average precision per class and difficulty.
    Eval(EvalArgs),
    /// Mean uncertainty per class.
    Stats(StatsArgs),
    /// Bird's-eye-view SVG of one frame.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Config file with `key = value` lines.
    #[arg(long, env = "MMLF_CONFIG")]
    pub config: Option<PathBuf>,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0, 1], got `{s}`")),
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub det3d: PathBuf,
    #[arg(long)]
    pub det2d: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_parser = unit_interval)]
    pub u_max: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    pub conf: Option<f64>,
    #[arg(long, value_parser = unit_interval)]
    pub nms: Option<f64>,
    #[arg(long, default_value_t = 1, value_parser = positive_usize)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub det3d: PathBuf,
    #[arg(long)]
    pub det2d: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// 2d, aos, bev, 3d or all.
    #[arg(long, default_value = "all")]
    pub metric: String,
    #[arg(long, default_value = "Car,Pedestrian,Cyclist")]
    pub classes: String,
    #[arg(long, default_value = "11")]
    pub interp: String,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = positive_usize)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value = "Car,Pedestrian,Cyclist")]
    pub classes: String,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub frame: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

/// A failure with its process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: 1,
            message: format!("{}: {e}", path.display()),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn read_optional(path: &Path) -> CliResult<Option<String>> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn parse_failure(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::input(format!("{}: {e}", path.display()))
}

/// Writes through a temporary file in the same directory, then renames.
fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(path, e))?;
    tmp.write_all(contents.as_bytes())
        .map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn list_frames(dir: &Path) -> CliResult<Vec<String>> {
    kitti_io::list_frames(dir).map_err(|e| CliError::io(dir, e))
}

fn resolve_config(arg: &ConfigArg) -> CliResult<RunConfig> {
    match &arg.config {
        Some(path) => kitti_io::load_config(&read(path)?).map_err(|e| parse_failure(path, e)),
        None => Ok(RunConfig::default()),
    }
}

fn parse_classes(list: &str) -> CliResult<ClassList> {
    ClassList::parse(list).map_err(CliError::usage)
}

fn load_frame(
    id: &str,
    det3d: &Path,
    det2d: &Path,
    calib: &Path,
    classes: &ClassList,
) -> CliResult<FrameInput> {
    let calib_path = kitti_io::frame_file(calib, id);
    let calib_text = read_optional(&calib_path)?.ok_or_else(|| {
        CliError::input(format!(
            "{}: missing calibration for frame {id}",
            calib_path.display()
        ))
    })?;
    let calib = kitti_io::parse_calib(&calib_text).map_err(|e| parse_failure(&calib_path, e))?;
    let p3 = kitti_io::frame_file(det3d, id);
    let dets3d = kitti_io::parse_det3d(&read(&p3)?, classes)
        .map_err(|e| parse_failure(&p3, e))?
        .records;
    let p2 = kitti_io::frame_file(det2d, id);
    let dets2d = match read_optional(&p2)? {
        Some(text) => {
            kitti_io::parse_det2d(&text, classes)
                .map_err(|e| parse_failure(&p2, e))?
                .records
        }
        None => Vec::new(),
    };
    Ok(FrameInput {
        dets3d,
        dets2d,
        calib,
    })
}

fn load_model(path: &Path, classes: &ClassList) -> CliResult<ModelParams> {
    let text = read_optional(path)?
        .ok_or_else(|| CliError::usage(format!("{}: model file not found", path.display())))?;
    let params = load_checkpoint(&text).map_err(|e| parse_failure(path, e))?;
    if params.num_classes() != classes.len() {
        return Err(CliError::input(format!(
            "{}: model has {} classes but the class list has {}",
            path.display(),
            params.num_classes(),
            classes.len()
        )));
    }
    Ok(params)
}

pub fn run_fuse(args: &FuseArgs, out: &mut impl std::io::Write) -> CliResult<()> {
    let mut cfg = resolve_config(&args.config)?;
    if let Some(v) = args.u_max {
        if v <= 0.0 {
            return Err(CliError::usage("--u-max must be positive"));
        }
        cfg.pipeline.u_max = v;
    }
    if let Some(v) = args.conf {
        cfg.pipeline.conf_threshold = v;
    }
    if let Some(v) = args.nms {
        cfg.pipeline.nms_iou = v;
    }
    cfg.validate().map_err(CliError::usage)?;
    let classes = cfg.pipeline.classes.clone();
    let params = load_model(&args.model, &classes)?;
    let ids = list_frames(&args.det3d)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let exec = Execution::from_jobs(args.jobs);
    let results = par::with_jobs(args.jobs, || {
        par::map(exec, &ids, |id| -> CliResult<usize> {
            let frame = load_frame(id, &args.det3d, &args.det2d, &args.calib, &classes)?;
            let dets = pipeline::fuse_frame(&frame, &params, &cfg.pipeline)
                .map_err(|e| CliError::input(format!("frame {id}: {e}")))?;
            let (results, sidecar) = kitti_io::write_results(&dets, &classes);
            write_atomic(&kitti_io::frame_file(&args.out, id), &results)?;
            write_atomic(&kitti_io::sidecar_file(&args.out, id), &sidecar)?;
            Ok(dets.len())
        })
    });
    let mut total = 0;
    for (id, r) in ids.iter().zip(results) {
        let n = r?;
        total += n;
        let _ = writeln!(out, "frame={id} detections={n}");
    }
    let _ = writeln!(out, "frames={} detections={total}", ids.len());
    Ok(())
}

pub fn run_train(args: &TrainArgs, out: &mut impl std::io::Write) -> CliResult<()> {
    let mut cfg = resolve_config(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate().map_err(CliError::usage)?;
    let classes = cfg.pipeline.classes.clone();
    let mut frames = Vec::new();
    for id in list_frames(&args.det3d)? {
        let input = load_frame(&id, &args.det3d, &args.det2d, &args.calib, &classes)?;
        let label_path = kitti_io::frame_file(&args.labels, &id);
        let labels = match read_optional(&label_path)? {
            Some(text) => {
                let objs =
                    kitti_io::parse_gt_labels(&text).map_err(|e| parse_failure(&label_path, e))?;
                Some(kitti_io::labels_for_training(&objs, &classes))
            }
            None => None,
        };
        frames.push(TrainingFrame { input, labels });
    }
    let outcome = match pipeline::train(&frames, &cfg.pipeline, &cfg.train) {
        Ok(o) => o,
        Err(crate::Error::EmptyTrainingSet) => {
            return Err(CliError::usage(
                "empty training set: no frame has both detections and labels",
            ))
        }
        Err(e) => return Err(CliError::input(e.to_string())),
    };
    for (k, loss) in outcome.epoch_losses.iter().enumerate() {
        let _ = writeln!(out, "epoch={} loss={loss:.6}", k + 1);
    }
    if let Some(dir) = args
        .out_model
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
    {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_atomic(&args.out_model, &save_checkpoint(&outcome.params))
}

fn load_results(dir: &Path, id: &str) -> CliResult<Vec<KittiObject>> {
    let path = kitti_io::frame_file(dir, id);
    match read_optional(&path)? {
        Some(text) => kitti_io::parse_results(&text).map_err(|e| parse_failure(&path, e)),
        None => Ok(Vec::new()),
    }
}

pub fn run_eval(args: &EvalArgs, out: &mut impl std::io::Write) -> CliResult<()> {
    let classes = parse_classes(&args.classes)?;
    let interp = Interp::parse(&args.interp).map_err(|e| CliError::usage(e.to_string()))?;
    let metrics = if args.metric.eq_ignore_ascii_case("all") {
        Metric::ALL.to_vec()
    } else {
        vec![Metric::parse(&args.metric).map_err(|e| CliError::usage(e.to_string()))?]
    };
    let ids = list_frames(&args.gt)?;
    let mut gts = Vec::with_capacity(ids.len());
    let mut preds = Vec::with_capacity(ids.len());
    for id in &ids {
        let path = kitti_io::frame_file(&args.gt, id);
        gts.push(kitti_io::parse_gt_labels(&read(&path)?).map_err(|e| parse_failure(&path, e))?);
        preds.push(load_results(&args.pred, id)?);
    }
    let exec = Execution::from_jobs(args.jobs);
    let reports = par::with_jobs(args.jobs, || {
        metrics
            .iter()
            .map(|&m| eval::evaluate_report(&preds, &gts, m, &classes, interp, exec))
            .collect::<Result<Vec<EvalReport>, _>>()
    })
    .map_err(|e| CliError::usage(e.to_string()))?;
    let _ = write!(out, "{}", eval::format_report(&reports));
    if let Some(path) = &args.out {
        write_atomic(path, &(eval::report_json(&reports) + "\n"))?;
    }
    Ok(())
}

fn load_uncertainties(dir: &Path, id: &str, count: usize) -> CliResult<Vec<Option<f64>>> {
    let path = kitti_io::sidecar_file(dir, id);
    let mut out = vec![None; count];
    if let Some(text) = read_optional(&path)? {
        for (idx, u) in
            kitti_io::parse_uncertainty_sidecar(&text).map_err(|e| parse_failure(&path, e))?
        {
            let slot = out.get_mut(idx).ok_or_else(|| {
                CliError::input(format!(
                    "{}: line index {idx} has no result line",
                    path.display()
                ))
            })?;
            *slot = Some(u);
        }
    }
    Ok(out)
}

pub fn run_stats(args: &StatsArgs, out: &mut impl std::io::Write) -> CliResult<()> {
    let classes = parse_classes(&args.classes)?;
    let mut items: Vec<(String, f64)> = Vec::new();
    for id in list_frames(&args.pred)? {
        let objs = load_results(&args.pred, &id)?;
        let us = load_uncertainties(&args.pred, &id, objs.len())?;
        for (o, u) in objs.iter().zip(us) {
            if let Some(u) = u {
                items.push((o.kind.clone(), u));
            }
        }
    }
    let means = eval::mean_uncertainty_per_class(items.iter().map(|(c, u)| (c.as_str(), *u)));
    let mut text = format!("{:<12} {:>12} {:>8}\n", "class", "mean_u", "count");
    for name in classes.names() {
        let count = items.iter().filter(|(c, _)| c == name).count();
        match means.get(name) {
            Some(m) => {
                let _ = writeln!(text, "{name:<12} {m:>12.6} {count:>8}");
            }
            None => {
                let _ = writeln!(text, "{name:<12} {:>12} {count:>8}", "-");
            }
        }
    }
    let _ = write!(out, "{text}");
    Ok(())
}

pub fn run_plot(args: &PlotArgs, out: &mut impl std::io::Write) -> CliResult<()> {
    let path = kitti_io::frame_file(&args.pred, &args.frame);
    if !kitti_io::is_frame_id(&args.frame) || !path.is_file() {
        return Err(CliError::usage(format!("unknown frame `{}`", args.frame)));
    }
    let objs = load_results(&args.pred, &args.frame)?;
    let us = load_uncertainties(&args.pred, &args.frame, objs.len())?;
    let dets: Vec<PlotBox> = objs
        .iter()
        .zip(us)
        .map(|(o, u)| PlotBox {
            box3d: o.box3d(),
            class: o.kind.clone(),
            uncertainty: u,
        })
        .collect();
    let gts = match &args.gt {
        Some(dir) => {
            let gpath = kitti_io::frame_file(dir, &args.frame);
            let text = read(&gpath)?;
            kitti_io::parse_gt_labels(&text)
                .map_err(|e| parse_failure(&gpath, e))?
                .iter()
                .filter(|g| !g.is_dont_care())
                .map(KittiObject::box3d)
                .collect()
        }
        None => Vec::new(),
    };
    write_atomic(&args.out, &plot::bev_svg(&dets, &gts))?;
    let _ = writeln!(out, "wrote {}", args.out.display());
    Ok(())
}

/// Runs a parsed command, writing normal output to `out`.
pub fn run(cli: &Cli, out: &mut impl std::io::Write) -> CliResult<()> {
    match &cli.command {
        Command::Fuse(a) => run_fuse(a, out),
        Command::Train(a) => run_train(a, out),
        Command::Eval(a) => run_eval(a, out),
        Command::Stats(a) => run_stats(a, out),
        Command::Plot(a) => run_plot(a, out),
    }
}
