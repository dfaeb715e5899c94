//! Batch front end. Every flag can also be set through a `TREESEG_*`
//! environment variable; command-line values win.
//!
//! Dataset layout, SemanticKITTI style:
//!
//! ```text
//! <root>/velodyne/<scan>.bin     point clouds
//! <root>/labels/<scan>.label     raw-id labels
//! <root>/scores/<scan>.score     per-point objectness (point-avg scorer only)
//! ```
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when any scan
//! failed to load or process.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::labelxfer::{transfer_labels, AccumulatedMap, DEFAULT_RADIUS};
use crate::lidar_io::{
    read_labels, read_labels_any, read_point_cloud, read_poses, read_scores, write_labels, write_point_cloud,
    LabelMap, LabelSpace, PointCloud,
};
use crate::metrics::{aggregate_report, evaluate_scan, ScanEval};
use crate::objectness::{
    binarize_targets, make_training_set, read_model, train_scorer_logged, write_model, GtInstances, Objective,
    ScorerModel, ScoringContext, TrainHyper, TrainingScan, DEFAULT_NEGATIVE_THRESHOLD, DEFAULT_POSITIVE_THRESHOLD,
};
use crate::pipeline::{segment_scan_with_stats, PanopticPrediction, SegmentOptions, SegmentationMode};
use crate::segtree::{validate_schedule, SegForest, DEFAULT_SCHEDULE};
use crate::synthgen::{generate_corpus, SceneSpec};
use crate::vocab::{remap_labels, Vocabulary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "treeseg", version, about = "Open-world lidar panoptic segmentation with segmentation trees")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "TREESEG_WORKERS", default_value_t = 0)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment every scan of a dataset into instances.
    Segment(SegmentArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Fit a learned objectness scorer on segmentation-tree nodes.
    TrainScorer(TrainArgs),
    /// Label scans from an accumulated labeled map.
    TransferLabels(TransferArgs),
    /// Write a synthetic dataset from a scene spec.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct VocabArg {
    /// Bundled vocabulary name (vocab1, vocab2, ...) or a config file path.
    #[arg(long, env = "TREESEG_VOCAB", default_value = "vocab1")]
    pub vocab: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Space {
    Raw,
    Vocab,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Dataset root with velodyne/ and labels/.
    #[arg(long, env = "TREESEG_DATA")]
    pub data: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArg,
    /// oracle, point-avg, or model:<path>.
    #[arg(long, env = "TREESEG_SCORER", default_value = "oracle")]
    pub scorer: String,
    #[arg(long, env = "TREESEG_MODE", default_value = "agnostic")]
    pub mode: String,
    /// Comma-separated, strictly decreasing eps values.
    #[arg(long, env = "TREESEG_SCHEDULE")]
    pub schedule: Option<String>,
    /// Accepted for a uniform interface; segmentation draws no random numbers.
    #[arg(long, env = "TREESEG_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "TREESEG_OUT")]
    pub out: PathBuf,
    /// Semantic input directory; defaults to <data>/labels.
    #[arg(long, env = "TREESEG_SEMANTICS")]
    pub semantics: Option<PathBuf>,
    /// Id space of the semantic input files.
    #[arg(long, env = "TREESEG_SEMANTICS_SPACE", value_enum, default_value_t = Space::Raw)]
    pub semantics_space: Space,
    /// Per-point score directory for point-avg; defaults to <data>/scores.
    #[arg(long, env = "TREESEG_SCORES")]
    pub scores: Option<PathBuf>,
    /// Minimum neighborhood size for core points; 1 is plain eps-connectivity.
    #[arg(long, env = "TREESEG_MIN_PTS", default_value_t = 1)]
    pub min_pts: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predicted .label files.
    #[arg(long, env = "TREESEG_PRED")]
    pub pred: PathBuf,
    /// Ground-truth dataset root (or its labels/ directory).
    #[arg(long, env = "TREESEG_GT")]
    pub gt: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArg,
    #[arg(long, env = "TREESEG_PRED_SPACE", value_enum, default_value_t = Space::Vocab)]
    pub pred_space: Space,
    #[arg(long, env = "TREESEG_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "TREESEG_DATA")]
    pub data: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArg,
    #[arg(long, env = "TREESEG_SCHEDULE")]
    pub schedule: Option<String>,
    /// Predicted semantics to build trees from; defaults to the ground truth.
    #[arg(long, env = "TREESEG_SEMANTICS")]
    pub semantics: Option<PathBuf>,
    #[arg(long, env = "TREESEG_OBJECTIVE", default_value = "regression")]
    pub objective: String,
    #[arg(long, env = "TREESEG_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "TREESEG_LR", default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, env = "TREESEG_BATCH", default_value_t = 512)]
    pub batch: usize,
    #[arg(long, env = "TREESEG_EPOCHS", default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, env = "TREESEG_HIDDEN", default_value_t = 16)]
    pub hidden: usize,
    /// Disable class-balanced batches for classification.
    #[arg(long, env = "TREESEG_NO_RESAMPLE")]
    pub no_resample: bool,
    #[arg(long, env = "TREESEG_POSITIVE", default_value_t = DEFAULT_POSITIVE_THRESHOLD)]
    pub positive: f64,
    #[arg(long, env = "TREESEG_NEGATIVE", default_value_t = DEFAULT_NEGATIVE_THRESHOLD)]
    pub negative: f64,
    #[arg(long, env = "TREESEG_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long, env = "TREESEG_MAP_CLOUD")]
    pub map_cloud: PathBuf,
    #[arg(long, env = "TREESEG_MAP_LABELS")]
    pub map_labels: PathBuf,
    /// Directory of scan .bin files.
    #[arg(long, env = "TREESEG_SCANS")]
    pub scans: PathBuf,
    /// One pose per scan, in sorted scan order.
    #[arg(long, env = "TREESEG_POSES")]
    pub poses: PathBuf,
    #[arg(long, env = "TREESEG_RADIUS", default_value_t = DEFAULT_RADIUS)]
    pub radius: f64,
    #[arg(long, env = "TREESEG_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Scene spec (JSON).
    #[arg(long, env = "TREESEG_SPEC")]
    pub spec: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long, env = "TREESEG_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "TREESEG_OUT")]
    pub out: PathBuf,
}

/// Distinguishes bad configuration from bad data for the exit code.
#[derive(Debug)]
pub enum Failure {
    Config(Error),
    Data(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Data(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration error: {e}"),
            Failure::Data(e) => write!(f, "data error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config<T>(r: Result<T>) -> CliResult<T> {
    r.map_err(Failure::Config)
}

fn data<T>(r: Result<T>) -> CliResult<T> {
    r.map_err(Failure::Data)
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("treeseg: {f}");
            f.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| Failure::Config(Error::arg(format!("cannot start worker pool: {e}"))))?;
    pool.install(|| match cli.command {
        Command::Segment(a) => cmd_segment(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::TrainScorer(a) => cmd_train_scorer(&a),
        Command::TransferLabels(a) => cmd_transfer_labels(&a),
        Command::Generate(a) => cmd_generate(&a),
    })
}

pub fn parse_schedule(text: Option<&str>) -> Result<Vec<f64>> {
    let schedule = match text {
        None => DEFAULT_SCHEDULE.to_vec(),
        Some(t) => t
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::arg(format!("bad schedule value {v:?}: {e}")))
            })
            .collect::<Result<_>>()?,
    };
    validate_schedule(&schedule)?;
    Ok(schedule)
}

pub fn parse_scorer(text: &str) -> Result<ScorerModel> {
    match text {
        "oracle" => Ok(ScorerModel::oracle()),
        "point-avg" | "point-average" => Ok(ScorerModel::point_average()),
        _ => match text.strip_prefix("model:") {
            Some(path) => read_model(path),
            None => Err(Error::arg(format!(
                "unknown scorer {text:?} (expected oracle, point-avg or model:<path>)"
            ))),
        },
    }
}

/// `<dir>/labels` when it exists, otherwise `dir` itself.
fn labels_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("labels");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

/// Sorted file stems in `dir` with the given extension.
pub fn list_scans(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    config(fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    data(fs::write(path, text).map_err(|e| Error::io(path, e)))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn to_vocab_space(labels: &LabelMap, space: Space, vocab: &Vocabulary) -> Result<LabelMap> {
    match space {
        Space::Raw => remap_labels(labels, vocab),
        Space::Vocab => Ok(LabelMap {
            space: LabelSpace::Vocab,
            ..labels.clone()
        }),
    }
}

#[derive(Debug, Serialize)]
struct ScanSummary {
    scan: String,
    points: usize,
    instances: usize,
    forests: usize,
    nodes: usize,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct SegmentSummary {
    vocab: String,
    scorer: String,
    mode: String,
    schedule: Vec<f64>,
    min_pts: usize,
    scans: usize,
    failed: usize,
    instances: usize,
    per_scan: Vec<ScanSummary>,
}

pub fn cmd_segment(a: &SegmentArgs) -> CliResult<()> {
    let start = Instant::now();
    let vocab = config(Vocabulary::load(&a.vocab.vocab))?;
    let scorer = config(parse_scorer(&a.scorer))?;
    let mode: SegmentationMode = config(a.mode.parse())?;
    let schedule = config(parse_schedule(a.schedule.as_deref()))?;
    if a.min_pts == 0 {
        return Err(Failure::Config(Error::arg("--min-pts must be at least 1")));
    }
    let velodyne = a.data.join("velodyne");
    let gt_dir = a.data.join("labels");
    let sem_dir = a.semantics.clone().unwrap_or_else(|| gt_dir.clone());
    let score_dir = a.scores.clone().unwrap_or_else(|| a.data.join("scores"));
    let scans = config(list_scans(&velodyne, "bin"))?;
    create_dir(&a.out)?;
    let opts = SegmentOptions {
        mode,
        schedule: schedule.clone(),
        min_pts: a.min_pts,
        majority_vote: true,
    };

    let results: Vec<ScanSummary> = scans
        .par_iter()
        .map(|scan| {
            let run = || -> Result<ScanSummary> {
                let cloud = read_point_cloud(velodyne.join(format!("{scan}.bin")))?;
                let n = cloud.len();
                let sem = read_labels(sem_dir.join(format!("{scan}.label")), n)?;
                let semantics = to_vocab_space(&sem, a.semantics_space, &vocab)?;
                let gt = match scorer.kind {
                    crate::objectness::ScorerKind::Oracle => {
                        let gt = remap_labels(&read_labels(gt_dir.join(format!("{scan}.label")), n)?, &vocab)?;
                        Some(GtInstances::from_labels(&gt, &vocab))
                    }
                    _ => None,
                };
                let scores = match scorer.kind {
                    crate::objectness::ScorerKind::PointAverage => {
                        Some(read_scores(score_dir.join(format!("{scan}.score")), n)?)
                    }
                    _ => None,
                };
                let ctx = ScoringContext {
                    gt: gt.as_ref(),
                    point_scores: scores.as_ref(),
                };
                let (pred, stats) = segment_scan_with_stats(&cloud, &semantics, &vocab, &scorer, &ctx, &opts)?;
                write_labels(&pred.to_label_map(), a.out.join(format!("{scan}.label")))?;
                Ok(ScanSummary {
                    scan: scan.clone(),
                    points: n,
                    instances: stats.instances,
                    forests: stats.forests,
                    nodes: stats.nodes,
                    error: None,
                })
            };
            run().unwrap_or_else(|e| {
                eprintln!("treeseg: scan {scan}: {e}");
                ScanSummary {
                    scan: scan.clone(),
                    points: 0,
                    instances: 0,
                    forests: 0,
                    nodes: 0,
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();

    let failed = results.iter().filter(|r| r.error.is_some()).count();
    let summary = SegmentSummary {
        vocab: a.vocab.vocab.clone(),
        scorer: a.scorer.clone(),
        mode: mode.to_string(),
        schedule,
        min_pts: a.min_pts,
        scans: results.len(),
        failed,
        instances: results.iter().map(|r| r.instances).sum(),
        per_scan: results,
    };
    write_text(&a.out.join("summary.json"), &to_json(&summary))?;
    eprintln!(
        "segmented {} scans ({} failed), {} instances, in {:.2}s",
        summary.scans,
        failed,
        summary.instances,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure::Data(Error::arg(format!("{failed} scan(s) failed"))));
    }
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let start = Instant::now();
    let vocab = config(Vocabulary::load(&a.vocab.vocab))?;
    let gt_dir = labels_dir(&a.gt);
    let pred_scans = config(list_scans(&a.pred, "label"))?;
    let gt_scans = config(list_scans(&gt_dir, "label"))?;
    let p: BTreeSet<&String> = pred_scans.iter().collect();
    let g: BTreeSet<&String> = gt_scans.iter().collect();
    if p != g {
        let no_pred: Vec<&&String> = g.difference(&p).collect();
        let no_gt: Vec<&&String> = p.difference(&g).collect();
        return Err(Failure::Data(Error::arg(format!(
            "prediction and ground-truth scans differ; missing predictions: {no_pred:?}; missing ground truth: {no_gt:?}"
        ))));
    }
    create_dir(&a.out)?;

    let evals: Vec<Result<ScanEval>> = gt_scans
        .par_iter()
        .map(|scan| {
            let raw = read_labels_any(gt_dir.join(format!("{scan}.label")))?;
            let pred = read_labels(a.pred.join(format!("{scan}.label")), raw.len())?;
            let pred = to_vocab_space(&pred, a.pred_space, &vocab)?;
            let gt = remap_labels(&raw, &vocab)?;
            evaluate_scan(
                scan,
                &PanopticPrediction::from_label_map(&pred),
                &gt,
                Some(&raw.semantic),
                &vocab,
            )
        })
        .collect();
    let mut ok = Vec::with_capacity(evals.len());
    for (scan, e) in gt_scans.iter().zip(evals) {
        match e {
            Ok(s) => ok.push(s),
            Err(e) => return Err(Failure::Data(Error::arg(format!("scan {scan}: {e}")))),
        }
    }
    let report = data(aggregate_report(&ok, &vocab))?;
    write_text(&a.out.join("report.json"), &report.to_json())?;
    write_text(&a.out.join("report.txt"), &report.to_text())?;
    eprintln!(
        "evaluated {} scans in {:.2}s; PQ {}",
        ok.len(),
        start.elapsed().as_secs_f64(),
        report.pq.map_or("-".into(), |v| format!("{:.4}", v))
    );
    Ok(())
}

pub fn cmd_train_scorer(a: &TrainArgs) -> CliResult<()> {
    let start = Instant::now();
    let vocab = config(Vocabulary::load(&a.vocab.vocab))?;
    let schedule = config(parse_schedule(a.schedule.as_deref()))?;
    let objective: Objective = config(a.objective.parse())?;
    let hyper = TrainHyper {
        lr: a.lr,
        batch: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        resample: !a.no_resample,
        hidden: a.hidden,
    };
    let velodyne = a.data.join("velodyne");
    let gt_dir = a.data.join("labels");
    let sem_dir = a.semantics.clone().unwrap_or_else(|| gt_dir.clone());
    let scans = config(list_scans(&velodyne, "bin"))?;
    create_dir(&a.out)?;

    struct Loaded {
        scan: String,
        cloud: PointCloud,
        forest: SegForest,
        gt: GtInstances,
    }
    let loaded: Vec<Loaded> = data(
        scans
            .par_iter()
            .map(|scan| {
                let cloud = read_point_cloud(velodyne.join(format!("{scan}.bin")))?;
                let n = cloud.len();
                let gt = remap_labels(&read_labels(gt_dir.join(format!("{scan}.label")), n)?, &vocab)?;
                let sem = remap_labels(&read_labels(sem_dir.join(format!("{scan}.label")), n)?, &vocab)?;
                let mask: Vec<u32> = (0..n as u32)
                    .filter(|&p| vocab.has_instances(sem.semantic[p as usize]))
                    .collect();
                let forest = SegForest::build(&cloud.points, &mask, &schedule, 1)?;
                Ok(Loaded {
                    scan: scan.clone(),
                    gt: GtInstances::from_labels(&gt, &vocab),
                    cloud,
                    forest,
                })
            })
            .collect::<Result<Vec<_>>>(),
    )?;
    let inputs: Vec<TrainingScan> = loaded
        .iter()
        .map(|l| TrainingScan {
            scan_id: &l.scan,
            points: &l.cloud.points,
            forest: &l.forest,
            gt: &l.gt,
        })
        .collect();
    let mut set = data(make_training_set(&inputs))?;
    if objective == Objective::Classification {
        set = config(binarize_targets(&set, a.positive, a.negative))?;
    }
    let (model, log) = data(train_scorer_logged(&set, objective, &hyper))?;
    data(write_model(&model, a.out.join("model.txt")))?;

    let mut loss = String::from("epoch,loss\n");
    for (e, l) in model.meta.as_ref().map_or(&[][..], |m| &m.loss_curve).iter().enumerate() {
        loss.push_str(&format!("{e},{l}\n"));
    }
    write_text(&a.out.join("loss.csv"), &loss)?;
    if objective == Objective::Classification {
        let mut b = String::from("batch,positives,negatives\n");
        for (i, (p, n)) in log.iter().enumerate() {
            b.push_str(&format!("{i},{p},{n}\n"));
        }
        write_text(&a.out.join("batches.csv"), &b)?;
    }
    eprintln!(
        "trained {} scorer on {} nodes from {} scans in {:.2}s",
        model.kind,
        set.len(),
        loaded.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn cmd_transfer_labels(a: &TransferArgs) -> CliResult<()> {
    let start = Instant::now();
    let map = data(AccumulatedMap::read(&a.map_cloud, &a.map_labels))?;
    let poses = config(read_poses(&a.poses))?;
    let scans = config(list_scans(&a.scans, "bin"))?;
    if poses.len() != scans.len() {
        return Err(Failure::Data(Error::arg(format!(
            "{} poses for {} scans",
            poses.len(),
            scans.len()
        ))));
    }
    create_dir(&a.out)?;
    let results: Vec<Result<()>> = scans
        .par_iter()
        .zip(&poses)
        .map(|(scan, pose)| {
            let cloud = read_point_cloud(a.scans.join(format!("{scan}.bin")))?;
            let labels = transfer_labels(&cloud, pose, &map, a.radius)?;
            write_labels(&labels, a.out.join(format!("{scan}.label")))
        })
        .collect();
    let mut failed = 0;
    for (scan, r) in scans.iter().zip(results) {
        if let Err(e) = r {
            eprintln!("treeseg: scan {scan}: {e}");
            failed += 1;
        }
    }
    eprintln!(
        "transferred labels to {} scans ({failed} failed) in {:.2}s",
        scans.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure::Data(Error::arg(format!("{failed} scan(s) failed"))));
    }
    Ok(())
}

pub fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let text = config(fs::read_to_string(&a.spec).map_err(|e| Error::io(&a.spec, e)))?;
    let mut spec = config(SceneSpec::from_json(&text))?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let scenes = config(generate_corpus(&spec))?;
    let velodyne = a.out.join("velodyne");
    let labels = a.out.join("labels");
    create_dir(&velodyne)?;
    create_dir(&labels)?;
    for s in &scenes {
        data(write_point_cloud(&s.cloud, velodyne.join(format!("{}.bin", s.cloud.scan_id))))?;
        data(write_labels(&s.labels, labels.join(format!("{}.label", s.cloud.scan_id))))?;
    }
    eprintln!("generated {} scans in {}", scenes.len(), a.out.display());
    Ok(())
}
