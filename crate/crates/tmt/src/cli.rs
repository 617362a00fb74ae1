//! Command-line driver: `train`, `eval`, `gradcheck`, `bench`, `inspect`.
//!
//! Exit codes: 0 success, 1 invalid arguments/configuration/data,
//! 2 numerical failure (non-finite loss, failed gradient check), 3 I/O or
//! malformed files.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use tmt_core::crossview::VIEW_NAMES;
use tmt_core::data::codec;
use tmt_core::data::synth::synth_generate;
use tmt_core::data::{holdout_split, Frames, Split, Tracklet};
use tmt_core::eval::{Metric, Protocol};
use tmt_core::experiment::{Experiment, ExperimentConfig, Variant};
use tmt_core::gradcheck::DEFAULT_STEP;
use tmt_core::gradsuite::{self, SuiteOptions, SUITE_TOLERANCE};
use tmt_core::model::train::{evaluate_tracklets, EvalConfig, ViewSelection};
use tmt_core::model::{InputGeometry, ModelConfig, TmtModel};

use crate::checkpoint;
use crate::config::{DataSource, Overrides, RunConfig};
use crate::cubes;
use crate::error::{AppError, ExitCode, Result};
use crate::report::{self, BenchRow};

pub const CHECKPOINT_FILE: &str = "checkpoint.tmtk";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const PER_QUERY_FILE: &str = "per_query_ap.csv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";
pub const DIAGNOSTIC_CHECKPOINT_FILE: &str = "diagnostic.tmtk";

#[derive(Debug, Parser)]
#[command(name = "tmt", version, about = "Trigeminal video descriptors: train, evaluate, check, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on synthetic or cube data; writes a checkpoint, per-epoch
    /// metrics and a held-out report into the output directory.
    Train(TrainArgs),
    /// Rank a gallery for every query with a trained checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every trainable component.
    Gradcheck(GradcheckArgs),
    /// Sweep one setting on the synthetic benchmark; CSV of mAP and Rank-1.
    Bench(BenchArgs),
    /// Print the header of a cube file or checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialisation and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Frames per clip.
    #[arg(long = "T", value_name = "FRAMES")]
    frames: Option<usize>,
    #[arg(long)]
    depth_self: Option<usize>,
    #[arg(long)]
    depth_cross: Option<usize>,
    /// Double-resolution images (64×32) and feature maps (16×8).
    #[arg(long)]
    hi_res: bool,
    /// Pool the raw rather than the attention-weighted features.
    #[arg(long)]
    literal_pool_sum: bool,
    /// Self-view feed-forward without residual connection and norm.
    #[arg(long)]
    literal_self_ffn: bool,
    /// Cross-view feed-forward without residual connection and norm.
    #[arg(long)]
    literal_cross_ffn: bool,
}

impl TrainArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out.clone(),
            epochs: self.epochs,
            frames: self.frames,
            depth_self: self.depth_self,
            depth_cross: self.depth_cross,
            hi_res: self.hi_res,
            literal_pool_sum: self.literal_pool_sum,
            literal_self_ffn: self.literal_self_ffn,
            literal_cross_ffn: self.literal_cross_ffn,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProtocolArg {
    #[value(name = "cross_camera")]
    CrossCamera,
    #[value(name = "single_gallery")]
    SingleGallery,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::CrossCamera => Protocol::CrossCamera,
            ProtocolArg::SingleGallery => Protocol::SingleGallery,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ViewsArg {
    Spatial,
    Temporal,
    St,
    All,
}

impl From<ViewsArg> for ViewSelection {
    fn from(v: ViewsArg) -> Self {
        match v {
            ViewsArg::Spatial => ViewSelection::Spatial,
            ViewsArg::Temporal => ViewSelection::Temporal,
            ViewsArg::St => ViewSelection::Spatiotemporal,
            ViewsArg::All => ViewSelection::All,
        }
    }
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["gallery", "synthetic"])))]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of gallery cube files.
    #[arg(long, requires = "query")]
    gallery: Option<PathBuf>,
    /// Directory of query cube files.
    #[arg(long, requires = "gallery")]
    query: Option<PathBuf>,
    /// Evaluate on the held-out split of the synthetic data instead.
    #[arg(long, conflicts_with_all = ["gallery", "query"])]
    synthetic: bool,
    /// Run configuration supplying the `synth` and `eval` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the synthetic data.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long, value_enum)]
    views: Option<ViewsArg>,
    #[arg(long)]
    max_rank: Option<usize>,
    /// Directory for the report and the per-query AP table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = DEFAULT_STEP)]
    h: f64,
    /// Perturb the analytic gradient of this component (negative control).
    #[arg(long, value_name = "COMPONENT")]
    corrupt: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    #[value(name = "T")]
    Frames,
    #[value(name = "depth_selfview")]
    DepthSelfview,
    #[value(name = "depth_crossview")]
    DepthCrossview,
    #[value(name = "hi_res")]
    HiRes,
    #[value(name = "views")]
    Views,
    #[value(name = "cross_on_off")]
    CrossOnOff,
    #[value(name = "variant")]
    Variant,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Self::Frames => "T",
            Self::DepthSelfview => "depth_selfview",
            Self::DepthCrossview => "depth_crossview",
            Self::HiRes => "hi_res",
            Self::Views => "views",
            Self::CrossOnOff => "cross_on_off",
            Self::Variant => "variant",
        }
    }

    fn default_values(self) -> &'static [&'static str] {
        match self {
            Self::Frames => &["6", "8", "10", "12"],
            Self::DepthSelfview | Self::DepthCrossview => &["1", "2", "3"],
            Self::HiRes => &["false", "true"],
            Self::Views => &["spatial", "temporal", "st", "all"],
            Self::CrossOnOff => &["on", "off"],
            Self::Variant => &["full", "self_view_only", "avg_pool_baseline"],
        }
    }
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated settings; the axis' customary sweep when omitted.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Seeds per setting (consecutive from `--seed`).
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// First seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Base configuration (synthetic data only); the synthetic benchmark
    /// when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    path: PathBuf,
}

/// Runs the command line `args` (program name first) and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::Validation as i32
            } else {
                ExitCode::Success as i32
            };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::Success as i32,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as i32
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| AppError::io(path, e))
}

/// Checks every cube against the model geometry, naming each offending
/// file and view.
fn check_cube_geometry(model: &ModelConfig, set: &[(PathBuf, Tracklet)]) -> Result<()> {
    let InputGeometry::Cubes { height, width } = model.input else {
        return Err(AppError::Validation(
            "the model consumes image frames; feature cubes cannot be fed to it".into(),
        ));
    };
    let want = (height, width, model.channels);
    let mut problems = Vec::new();
    for (path, t) in set {
        let Frames::Cubes(cubes) = &t.frames else { continue };
        for (view, cube) in VIEW_NAMES.iter().zip(cubes) {
            let got = (cube.height(), cube.width(), cube.channels());
            if got != want {
                problems.push(format!(
                    "{}: {view} cube is H×W×C = {}×{}×{}, the model expects {}×{}×{}",
                    path.display(),
                    got.0,
                    got.1,
                    got.2,
                    want.0,
                    want.1,
                    want.2
                ));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(AppError::Validation(format!(
            "data do not fit the model:\n  - {}",
            problems.join("\n  - ")
        )))
    }
}

fn load_run_data(cfg: &RunConfig) -> Result<Vec<Tracklet>> {
    match &cfg.data {
        DataSource::Synthetic => Ok(synth_generate(&cfg.synth)?),
        DataSource::Cubes { dir } => {
            let set = cubes::load_tracklet_files(dir)?;
            check_cube_geometry(&cfg.model, &set)?;
            Ok(set.into_iter().map(|(_, t)| t).collect())
        }
    }
}

fn progress(total: usize, r: &tmt_core::experiment::EpochRecord) {
    let mut line = format!("epoch {}/{total}  lr {:.3e}  loss {:.4}", r.epoch + 1, r.lr, r.mean_loss);
    if let Some(r1) = r.rank1 {
        line.push_str(&format!("  rank1 {r1:.4}"));
    }
    if let Some(m) = r.map {
        line.push_str(&format!("  mAP {m:.4}"));
    }
    eprintln!("{line}");
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.apply(&a.overrides());
    cfg.validate()?;
    let data = load_run_data(&cfg)?;
    let mut exp = Experiment::new(&cfg.experiment(), &data)?;

    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    write_file(&out.join(CONFIG_ECHO_FILE), cfg.to_toml())?;
    while !exp.is_finished() {
        match exp.run_epoch() {
            Ok(r) => progress(cfg.train.epochs, r),
            Err(e @ tmt_core::Error::NonFinite { .. }) => return Err(write_diagnostic(&out, &cfg, &exp, e)),
            Err(e) => return Err(e.into()),
        }
    }
    let outcome = exp.finish(|_| {})?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &outcome.model, outcome.records.len())?;
    report::write_metrics(&out.join(METRICS_FILE), &outcome.records)?;
    report::write_report(&out.join(REPORT_FILE), &outcome.report, &cfg)?;
    report::write_per_query_ap(&out.join(PER_QUERY_FILE), &outcome.report)?;
    println!(
        "trained {} steps; held-out rank1 {:.4}{}; outputs in {}",
        outcome.steps,
        outcome.report.rank1(),
        outcome.report.map.map(|m| format!(", mAP {m:.4}")).unwrap_or_default(),
        out.display()
    );
    Ok(())
}

/// Writes the model as it stood at a numerical failure, together with the
/// run history, and returns the error to report. A failed step leaves the
/// parameters untouched; a failure found during evaluation means the
/// preceding step already produced non-finite parameters.
fn write_diagnostic(out: &Path, cfg: &RunConfig, exp: &Experiment, e: tmt_core::Error) -> AppError {
    let trainer = exp.trainer();
    let diag = serde_json::json!({
        "error": e.to_string(),
        "failed_epoch": trainer.epoch(),
        "steps_completed": trainer.steps_taken(),
        "records": exp.records(),
        "config": cfg,
    });
    let written = serde_json::to_string_pretty(&diag)
        .map_err(|err| AppError::Validation(err.to_string()))
        .and_then(|text| write_file(&out.join(DIAGNOSTIC_FILE), text + "\n"))
        .and_then(|()| {
            checkpoint::save(&out.join(DIAGNOSTIC_CHECKPOINT_FILE), &trainer.model, trainer.epoch())
        });
    match written {
        Ok(()) => AppError::Numeric(format!(
            "{e}; model state and history written to {}",
            out.join(DIAGNOSTIC_FILE).display()
        )),
        Err(w) => AppError::Numeric(format!("{e}; writing the diagnostic also failed: {w}")),
    }
}

fn eval_settings(a: &EvalArgs, base: EvalConfig) -> Result<EvalConfig> {
    let mut e = base;
    if let Some(p) = a.protocol {
        e.protocol = p.into();
    }
    if let Some(m) = a.metric {
        e.metric = m.into();
    }
    if let Some(v) = a.views {
        e.views = v.into();
    }
    if let Some(k) = a.max_rank {
        e.max_rank = k;
    }
    if e.max_rank == 0 {
        return Err(AppError::Validation("max rank must be ≥ 1".into()));
    }
    Ok(e)
}

/// Synthetic held-out split rendered at the model's image geometry.
fn synthetic_split(model: &TmtModel, cfg: &RunConfig) -> Result<Split> {
    let InputGeometry::Images { height, width } = model.config().input else {
        return Err(AppError::Validation(
            "synthetic data are image clips but the checkpoint consumes feature cubes".into(),
        ));
    };
    let mut spec = cfg.synth.clone();
    spec.image_height = height;
    spec.image_width = width;
    Ok(holdout_split(&synth_generate(&spec)?)?)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    let settings = eval_settings(a, cfg.eval)?;
    let (model, header) = checkpoint::load(&a.checkpoint)?;
    let (query, gallery) = match (&a.query, &a.gallery) {
        (Some(q), Some(g)) => {
            let q = cubes::load_tracklet_files(q)?;
            let g = cubes::load_tracklet_files(g)?;
            check_cube_geometry(model.config(), &q)?;
            check_cube_geometry(model.config(), &g)?;
            let strip = |v: Vec<(PathBuf, Tracklet)>| v.into_iter().map(|(_, t)| t).collect::<Vec<_>>();
            (strip(q), strip(g))
        }
        _ => {
            let split = synthetic_split(&model, &cfg)?;
            (split.query, split.gallery)
        }
    };
    let rep = evaluate_tracklets(&model, &query, &gallery, &settings)?;
    let echo = serde_json::json!({
        "checkpoint": a.checkpoint,
        "model": header.model,
        "eval": settings,
        "queries": query.len(),
        "gallery": gallery.len(),
    });
    let text = report::report_json(&rep, &echo)?;
    println!("{text}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        report::write_report(&dir.join(REPORT_FILE), &rep, &echo)?;
        report::write_per_query_ap(&dir.join(PER_QUERY_FILE), &rep)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    if !(a.h > 0.0 && a.h.is_finite()) {
        return Err(AppError::Validation(format!("--h must be a positive finite step, got {}", a.h)));
    }
    let opts = SuiteOptions {
        step: a.h,
        seed: a.seed,
        corrupt: a.corrupt.clone(),
    };
    let entries = gradsuite::run_suite(&opts)?;
    println!("{:<26} {:>14} {:>8}  result", "component", "max_rel_err", "coords");
    for e in &entries {
        println!(
            "{:<26} {:>14.3e} {:>8}  {}",
            e.component,
            e.report.max_relative_error,
            e.report.coordinates,
            if e.passed() { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.component.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(AppError::Numeric(format!(
            "{} of {} components exceed relative error {SUITE_TOLERANCE:e}: {}",
            failed.len(),
            entries.len(),
            failed.join(", ")
        )))
    }
}

fn parse_setting(axis: Axis, value: &str, cfg: &mut ExperimentConfig) -> std::result::Result<(), String> {
    let count = || value.parse::<usize>().map_err(|_| format!("{} expects a count, got {value:?}", axis.name()));
    match axis {
        Axis::Frames => cfg.model.frames = count()?,
        Axis::DepthSelfview => cfg.model.depth_self = count()?,
        Axis::DepthCrossview => cfg.model.depth_cross = count()?,
        Axis::HiRes => {
            let on = value
                .parse::<bool>()
                .map_err(|_| format!("hi_res expects true or false, got {value:?}"))?;
            let g = InputGeometry::images(on);
            let InputGeometry::Images { height, width } = g else { unreachable!() };
            cfg.model.input = g;
            cfg.synth.image_height = height;
            cfg.synth.image_width = width;
        }
        Axis::Views => {
            cfg.eval.views = match value {
                "spatial" => ViewSelection::Spatial,
                "temporal" => ViewSelection::Temporal,
                "st" => ViewSelection::Spatiotemporal,
                "all" => ViewSelection::All,
                _ => return Err(format!("views expects spatial, temporal, st or all, got {value:?}")),
            }
        }
        Axis::CrossOnOff => {
            cfg.model.use_crossview = match value {
                "on" => true,
                "off" => false,
                _ => return Err(format!("cross_on_off expects on or off, got {value:?}")),
            }
        }
        Axis::Variant => {
            let v = Variant::ALL
                .into_iter()
                .find(|v| v.name() == value)
                .ok_or_else(|| format!("variant expects full, self_view_only or avg_pool_baseline, got {value:?}"))?;
            cfg.model = v.apply(&cfg.model);
        }
    }
    Ok(())
}

/// A trained model, reusable by settings that differ only in evaluation.
struct Trained {
    cfg: ExperimentConfig,
    model: TmtModel,
    split: Split,
}

impl Trained {
    fn serves(&self, cfg: &ExperimentConfig) -> bool {
        self.cfg.synth == cfg.synth && self.cfg.model == cfg.model && self.cfg.train == cfg.train
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(AppError::Validation("--seeds must be ≥ 1".into()));
    }
    let base = match &a.config {
        Some(p) => {
            let rc = RunConfig::load(Some(p))?;
            if rc.data != DataSource::Synthetic {
                return Err(AppError::Validation("bench runs on synthetic data only".into()));
            }
            rc.experiment()
        }
        None => ExperimentConfig::benchmark(a.seed),
    };
    let values: Vec<String> = if a.values.is_empty() {
        a.axis.default_values().iter().map(|s| s.to_string()).collect()
    } else {
        a.values.clone()
    };

    // Build and validate every run before training any.
    let mut plan = Vec::new();
    let mut problems = Vec::new();
    for v in &values {
        let mut runs = Vec::new();
        for i in 0..a.seeds as u64 {
            let mut cfg = base.clone();
            let seed = a.seed + i;
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Err(p) = parse_setting(a.axis, v, &mut cfg) {
                problems.push(p);
                break;
            }
            problems.extend(cfg.problems().into_iter().map(|p| format!("{}={v}: {p}", a.axis.name())));
            runs.push(cfg);
        }
        plan.push((v.clone(), runs));
    }
    if !problems.is_empty() {
        problems.dedup();
        return Err(AppError::Validation(format!(
            "invalid bench settings:\n  - {}",
            problems.join("\n  - ")
        )));
    }

    let mut trained: Vec<Trained> = Vec::new();
    let mut rows = Vec::new();
    for (value, runs) in &plan {
        let mut maps = Vec::new();
        let mut rank1s = Vec::new();
        for cfg in runs {
            let rep = match trained.iter().find(|t| t.serves(cfg)) {
                Some(t) => evaluate_tracklets(&t.model, &t.split.query, &t.split.gallery, &cfg.eval)?,
                None => {
                    let data = synth_generate(&cfg.synth)?;
                    let exp = Experiment::new(cfg, &data)?;
                    let split = exp.split().clone();
                    let outcome = exp.finish(|_| {})?;
                    trained.push(Trained {
                        cfg: cfg.clone(),
                        model: outcome.model,
                        split,
                    });
                    outcome.report
                }
            };
            eprintln!(
                "{}={value} seed {}: rank1 {:.4}{}",
                a.axis.name(),
                cfg.train.seed,
                rep.rank1(),
                rep.map.map(|m| format!(" mAP {m:.4}")).unwrap_or_default()
            );
            rank1s.push(rep.rank1());
            if let Some(m) = rep.map {
                maps.push(m);
            }
        }
        let (rank1_mean, rank1_std) = report::mean_std(&rank1s);
        let (map_mean, map_std) = if maps.len() == rank1s.len() {
            let (m, s) = report::mean_std(&maps);
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        rows.push(BenchRow {
            axis: a.axis.name().to_string(),
            value: value.clone(),
            seeds: runs.len(),
            map_mean,
            map_std,
            rank1_mean,
            rank1_std,
        });
    }

    match &a.out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| AppError::io(path, e))?;
            report::write_bench(file, &rows).map_err(|e| AppError::format(path, e))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            report::write_bench(&mut lock, &rows).map_err(|e| AppError::format("<stdout>", e))?;
            lock.flush().map_err(|e| AppError::io("<stdout>", e))
        }
    }
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.path).map_err(|e| AppError::io(&a.path, e))?;
    if bytes.starts_with(checkpoint::MAGIC) {
        let h = checkpoint::load_header(&a.path)?;
        let params: usize = h.manifest.iter().map(|m| m.shape.iter().product::<usize>()).sum();
        let text = serde_json::to_string_pretty(&h).map_err(|e| AppError::Validation(e.to_string()))?;
        println!("checkpoint: {} tensors, {params} values", h.manifest.len());
        println!("{text}");
        return Ok(());
    }
    if bytes.starts_with(&codec::MAGIC) {
        let h = codec::decode_header(&bytes).map_err(crate::error::at_path(&a.path))?;
        println!(
            "cube triple: T={} H={} W={} C={} ({} bytes)",
            h.frames,
            h.height,
            h.width,
            h.channels,
            h.encoded_len()
        );
        let side = cubes::sidecar_path(&a.path);
        if let Ok(text) = fs::read_to_string(&side) {
            println!("sidecar {}:\n{}", side.display(), text.trim_end());
        }
        return Ok(());
    }
    Err(AppError::format(&a.path, "neither a checkpoint nor a cube file (unknown magic)"))
}
