//! Segment objectness scoring.
//!
//! Four scorer kinds share one interface:
//!
//! * `oracle`: IoU of the segment with its best-matching ground-truth instance;
//! * `point-average`: mean of externally produced per-point scores;
//! * `learned-regressor` / `learned-classifier`: a small model over geometric
//!   segment features, trained on tree nodes with IoU targets (mean-squared
//!   error) or binarized targets (cross-entropy with class-balanced batches).
//!
//! Learned models always end in a sigmoid, so every score lies in `[0, 1]`.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lidar_io::{LabelMap, PerPointScores, Point};
use crate::segtree::{NodeId, SegForest};
use crate::spatial::SpatialIndex;
use crate::vocab::{Vocabulary, IGNORE_ID};

/// Number of segment features, including the trailing constant bias term.
pub const FEATURE_DIM: usize = 9;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "log_count",
    "extent_x",
    "extent_y",
    "extent_z",
    "pca_ratio_21",
    "pca_ratio_31",
    "centroid_height",
    "mean_nn_dist",
    "bias",
];

/// `|a ∩ b| / |a ∪ b|` over point-index sets; 0 when both are empty.
pub fn segment_iou(a: &[u32], b: &[u32]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Best IoU of `segment` against any ground-truth instance; 0 with no instances.
pub fn oracle_score(segment: &[u32], gt_instances: &[Vec<u32>]) -> f64 {
    gt_instances
        .iter()
        .map(|g| segment_iou(segment, g))
        .fold(0.0, f64::max)
}

pub fn point_average_score(segment: &[u32], scores: &PerPointScores) -> Result<f64> {
    if segment.is_empty() {
        return Err(Error::arg("cannot average scores over an empty segment"));
    }
    let mut sum = 0.0f64;
    for &i in segment {
        let v = scores.values.get(i as usize).ok_or_else(|| {
            Error::arg(format!("point {i} has no score ({} scores)", scores.len()))
        })?;
        sum += *v as f64;
    }
    Ok((sum / segment.len() as f64).clamp(0.0, 1.0))
}

/// Ground-truth instances of one scan, indexed per point for linear-time oracle scoring.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GtInstances {
    /// Instance slot per point, `u32::MAX` for points outside every instance.
    slot: Vec<u32>,
    sizes: Vec<u32>,
}

const NO_SLOT: u32 = u32::MAX;

impl GtInstances {
    /// Disjoint point sets over a cloud of `n` points.
    pub fn from_sets(n: usize, sets: &[Vec<u32>]) -> Result<Self> {
        let mut slot = vec![NO_SLOT; n];
        let mut sizes = Vec::with_capacity(sets.len());
        for (k, set) in sets.iter().enumerate() {
            let mut size = 0;
            for &p in set {
                let s = slot
                    .get_mut(p as usize)
                    .ok_or_else(|| Error::arg(format!("instance point {p} out of range")))?;
                if *s != NO_SLOT {
                    return Err(Error::arg(format!("point {p} belongs to two instances")));
                }
                *s = k as u32;
                size += 1;
            }
            sizes.push(size);
        }
        Ok(GtInstances { slot, sizes })
    }

    /// Instances of vocabulary-space labels: points of thing/other classes
    /// with a non-zero instance id, grouped by `(class, instance)`.
    pub fn from_labels(labels: &LabelMap, vocab: &Vocabulary) -> Self {
        let mut ids: HashMap<(u32, u32), u32> = HashMap::new();
        let mut slot = vec![NO_SLOT; labels.len()];
        let mut sizes = Vec::new();
        for (p, (&sem, &inst)) in labels.semantic.iter().zip(&labels.instance).enumerate() {
            if sem == IGNORE_ID || inst == 0 || !vocab.has_instances(sem) {
                continue;
            }
            let next = ids.len() as u32;
            let k = *ids.entry((sem, inst)).or_insert(next);
            if k == next {
                sizes.push(0);
            }
            sizes[k as usize] += 1;
            slot[p] = k;
        }
        GtInstances { slot, sizes }
    }

    pub fn num_instances(&self) -> usize {
        self.sizes.len()
    }

    pub fn sets(&self) -> Vec<Vec<u32>> {
        let mut sets = vec![Vec::new(); self.sizes.len()];
        for (p, &s) in self.slot.iter().enumerate() {
            if s != NO_SLOT {
                sets[s as usize].push(p as u32);
            }
        }
        sets
    }

    /// Same value as [`oracle_score`] against [`GtInstances::sets`], in `O(|segment|)`.
    pub fn best_iou(&self, segment: &[u32]) -> f64 {
        let mut inter: HashMap<u32, u32> = HashMap::new();
        for &p in segment {
            if let Some(&s) = self.slot.get(p as usize) {
                if s != NO_SLOT {
                    *inter.entry(s).or_default() += 1;
                }
            }
        }
        inter
            .into_iter()
            .map(|(s, i)| i as f64 / (segment.len() as f64 + self.sizes[s as usize] as f64 - i as f64))
            .fold(0.0, f64::max)
    }
}

/// Geometric description of a segment; see [`FEATURE_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentFeatures(pub [f64; FEATURE_DIM]);

pub fn extract_features(points: &[Point], segment: &[u32]) -> Result<SegmentFeatures> {
    if segment.is_empty() {
        return Err(Error::arg("cannot describe an empty segment"));
    }
    let pts: Vec<Point> = segment
        .iter()
        .map(|&i| {
            points
                .get(i as usize)
                .copied()
                .ok_or_else(|| Error::arg(format!("segment point {i} out of range")))
        })
        .collect::<Result<_>>()?;
    let n = pts.len();
    let mut f = [0.0; FEATURE_DIM];
    f[0] = (1.0 + n as f64).ln();
    f[8] = 1.0;
    if n == 1 {
        return Ok(SegmentFeatures(f));
    }

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut mean = [0.0; 3];
    for p in &pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
            mean[a] += p[a];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for a in 0..3 {
        f[1 + a] = hi[a] - lo[a];
    }

    let mut cov = Matrix3::<f64>::zeros();
    for p in &pts {
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] += (p[r] - mean[r]) * (p[c] - mean[c]);
            }
        }
    }
    cov /= n as f64;
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    if eig[0] > 0.0 {
        f[4] = (eig[1] / eig[0]).clamp(0.0, 1.0);
        f[5] = (eig[2] / eig[0]).clamp(0.0, 1.0);
    }
    f[6] = mean[2] - lo[2];

    let index = SpatialIndex::build(&pts)?;
    let total: f64 = (0..n)
        .map(|i| index.nearest(&pts[i], Some(i)).map_or(0.0, |(_, d)| d))
        .sum();
    f[7] = total / n as f64;
    Ok(SegmentFeatures(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    Oracle,
    PointAverage,
    LearnedRegressor,
    LearnedClassifier,
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScorerKind::Oracle => "oracle",
            ScorerKind::PointAverage => "point-average",
            ScorerKind::LearnedRegressor => "learned-regressor",
            ScorerKind::LearnedClassifier => "learned-classifier",
        })
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(ScorerKind::Oracle),
            "point-average" | "point-avg" => Ok(ScorerKind::PointAverage),
            "learned-regressor" => Ok(ScorerKind::LearnedRegressor),
            "learned-classifier" => Ok(ScorerKind::LearnedClassifier),
            _ => Err(Error::arg(format!("unknown scorer kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Mean-squared error against IoU targets.
    Regression,
    /// Binary cross-entropy against binarized targets.
    Classification,
}

impl Objective {
    fn kind(self) -> ScorerKind {
        match self {
            Objective::Regression => ScorerKind::LearnedRegressor,
            Objective::Classification => ScorerKind::LearnedClassifier,
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Objective::Regression),
            "classification" => Ok(Objective::Classification),
            _ => Err(Error::arg(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Balance positive and negative rows in every classification batch.
    pub resample: bool,
    /// Width of the optional hidden layer; 0 for a linear model.
    pub hidden: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 2e-3,
            batch: 512,
            epochs: 200,
            seed: 0,
            resample: true,
            hidden: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub hyper: TrainHyper,
    /// Mean loss over the whole training set after each epoch.
    pub loss_curve: Vec<f64>,
}

/// Weights of a learned scorer: standardization followed by an optional
/// ReLU hidden layer and a sigmoid output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedWeights {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
    /// Hidden layer rows, each over the standardized features.
    pub hidden: Vec<[f64; FEATURE_DIM]>,
    /// Output weights: over the features when `hidden` is empty, otherwise
    /// over the hidden units followed by one bias weight.
    pub output: Vec<f64>,
}

impl LearnedWeights {
    fn new(mean: [f64; FEATURE_DIM], std: [f64; FEATURE_DIM], width: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (2.0 / FEATURE_DIM as f64).sqrt();
        let hidden = (0..width)
            .map(|_| [0; FEATURE_DIM].map(|_| rng.gen_range(-scale..scale)))
            .collect();
        let output = if width == 0 {
            vec![0.0; FEATURE_DIM]
        } else {
            (0..=width).map(|_| rng.gen_range(-0.1..0.1)).collect()
        };
        LearnedWeights {
            mean,
            std,
            hidden,
            output,
        }
    }

    pub fn standardize(&self, f: &SegmentFeatures) -> [f64; FEATURE_DIM] {
        let mut x = [0.0; FEATURE_DIM];
        for k in 0..FEATURE_DIM {
            x[k] = (f.0[k] - self.mean[k]) / self.std[k];
        }
        x
    }

    pub fn num_params(&self) -> usize {
        self.hidden.len() * FEATURE_DIM + self.output.len()
    }

    /// Flattened parameters: hidden rows, then output weights.
    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.hidden.iter().flatten().copied().collect();
        p.extend_from_slice(&self.output);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut it = p.iter().copied();
        for row in &mut self.hidden {
            for w in row.iter_mut() {
                *w = it.next().expect("parameter count");
            }
        }
        for w in &mut self.output {
            *w = it.next().expect("parameter count");
        }
    }

    /// Pre-sigmoid output for standardized features, with the hidden activations.
    fn forward(&self, x: &[f64; FEATURE_DIM]) -> (f64, Vec<f64>) {
        if self.hidden.is_empty() {
            let z = self.output.iter().zip(x).map(|(w, v)| w * v).sum();
            return (z, Vec::new());
        }
        let h: Vec<f64> = self
            .hidden
            .iter()
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>().max(0.0))
            .collect();
        let width = h.len();
        let z = self.output[..width].iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + self.output[width];
        (z, h)
    }

    pub fn predict_standardized(&self, x: &[f64; FEATURE_DIM]) -> f64 {
        sigmoid(self.forward(x).0)
    }

    pub fn predict(&self, f: &SegmentFeatures) -> f64 {
        self.predict_standardized(&self.standardize(f))
    }

    /// Loss on one standardized row and its gradient with respect to [`Self::params`].
    pub fn loss_and_grad(&self, x: &[f64; FEATURE_DIM], target: f64, objective: Objective) -> (f64, Vec<f64>) {
        let (z, h) = self.forward(x);
        let (loss, dz) = loss_and_dz(z, target, objective);
        let mut grad = Vec::with_capacity(self.num_params());
        if self.hidden.is_empty() {
            grad.extend(x.iter().map(|v| dz * v));
            return (loss, grad);
        }
        let width = h.len();
        for (j, row) in self.hidden.iter().enumerate() {
            let dh = if h[j] > 0.0 { dz * self.output[j] } else { 0.0 };
            grad.extend(row.iter().zip(x).map(|(_, v)| dh * v));
        }
        grad.extend(h.iter().map(|v| dz * v));
        grad.push(dz);
        debug_assert_eq!(grad.len(), width * FEATURE_DIM + width + 1);
        (loss, grad)
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn loss_and_dz(z: f64, target: f64, objective: Objective) -> (f64, f64) {
    let s = sigmoid(z);
    match objective {
        Objective::Regression => {
            let d = s - target;
            (d * d, 2.0 * d * s * (1.0 - s))
        }
        Objective::Classification => (softplus(z) - target * z, s - target),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerModel {
    pub kind: ScorerKind,
    pub weights: Option<LearnedWeights>,
    pub meta: Option<TrainingMeta>,
}

impl ScorerModel {
    pub fn oracle() -> Self {
        ScorerModel {
            kind: ScorerKind::Oracle,
            weights: None,
            meta: None,
        }
    }

    pub fn point_average() -> Self {
        ScorerModel {
            kind: ScorerKind::PointAverage,
            weights: None,
            meta: None,
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(
            self.kind,
            ScorerKind::LearnedRegressor | ScorerKind::LearnedClassifier
        )
    }
}

/// Inputs some scorer kinds need besides the segment geometry.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoringContext<'a> {
    pub gt: Option<&'a GtInstances>,
    pub point_scores: Option<&'a PerPointScores>,
}

/// Scores one segment with `model`, dispatching on its kind.
pub fn score(model: &ScorerModel, points: &[Point], segment: &[u32], ctx: &ScoringContext) -> Result<f64> {
    let s = match model.kind {
        ScorerKind::Oracle => {
            let gt = ctx
                .gt
                .ok_or_else(|| Error::arg("oracle scorer needs ground-truth instances"))?;
            gt.best_iou(segment)
        }
        ScorerKind::PointAverage => {
            let scores = ctx
                .point_scores
                .ok_or_else(|| Error::arg("point-average scorer needs per-point scores"))?;
            point_average_score(segment, scores)?
        }
        ScorerKind::LearnedRegressor | ScorerKind::LearnedClassifier => {
            let w = model
                .weights
                .as_ref()
                .ok_or_else(|| Error::arg("learned scorer has no weights"))?;
            w.predict(&extract_features(points, segment)?)
        }
    };
    Ok(s)
}

/// Checks that `ctx` carries what `model` needs.
pub fn check_context(model: &ScorerModel, ctx: &ScoringContext) -> Result<()> {
    match model.kind {
        ScorerKind::Oracle if ctx.gt.is_none() => Err(Error::arg("oracle scorer needs ground-truth instances")),
        ScorerKind::PointAverage if ctx.point_scores.is_none() => {
            Err(Error::arg("point-average scorer needs per-point scores"))
        }
        _ if model.is_learned() && model.weights.is_none() => Err(Error::arg("learned scorer has no weights")),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRow {
    pub features: SegmentFeatures,
    pub target: f64,
    pub scan_id: String,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub rows: Vec<TrainingRow>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One scan's contribution to a training set.
pub struct TrainingScan<'a> {
    pub scan_id: &'a str,
    pub points: &'a [Point],
    pub forest: &'a SegForest,
    pub gt: &'a GtInstances,
}

/// One row per tree node; the target is the node's best IoU with a GT instance.
pub fn make_training_set(scans: &[TrainingScan]) -> Result<TrainingSet> {
    let mut rows = Vec::new();
    for scan in scans {
        let scan_rows: Vec<TrainingRow> = (0..scan.forest.len() as NodeId)
            .into_par_iter()
            .map(|id| {
                let seg = scan.forest.points(id);
                Ok(TrainingRow {
                    features: extract_features(scan.points, seg)?,
                    target: scan.gt.best_iou(seg),
                    scan_id: scan.scan_id.to_string(),
                    node: id,
                })
            })
            .collect::<Result<_>>()?;
        rows.extend(scan_rows);
    }
    Ok(TrainingSet { rows })
}

/// Targets `>= hi` become 1, targets `<= lo` become 0, the rest are dropped.
pub fn binarize_targets(set: &TrainingSet, hi: f64, lo: f64) -> Result<TrainingSet> {
    if !(hi > lo) {
        return Err(Error::arg(format!("binarization needs hi > lo, got hi={hi}, lo={lo}")));
    }
    let rows = set
        .rows
        .iter()
        .filter_map(|r| {
            let t = if r.target >= hi {
                1.0
            } else if r.target <= lo {
                0.0
            } else {
                return None;
            };
            Some(TrainingRow {
                target: t,
                ..r.clone()
            })
        })
        .collect();
    Ok(TrainingSet { rows })
}

pub const DEFAULT_POSITIVE_THRESHOLD: f64 = 0.7;
pub const DEFAULT_NEGATIVE_THRESHOLD: f64 = 0.3;

/// Per-batch `(positives, negatives)` counts recorded during classification training.
pub type BatchLog = Vec<(u32, u32)>;

pub fn train_scorer(set: &TrainingSet, objective: Objective, hyper: &TrainHyper) -> Result<ScorerModel> {
    train_scorer_logged(set, objective, hyper).map(|(m, _)| m)
}

/// Adam on mini-batches; deterministic for a given `(set, objective, hyper)`.
pub fn train_scorer_logged(
    set: &TrainingSet,
    objective: Objective,
    hyper: &TrainHyper,
) -> Result<(ScorerModel, BatchLog)> {
    if set.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if hyper.batch == 0 || hyper.epochs == 0 || !(hyper.lr > 0.0) {
        return Err(Error::arg("batch, epochs and lr must be positive"));
    }
    if set.rows.iter().any(|r| !(0.0..=1.0).contains(&r.target)) {
        return Err(Error::arg("training targets must lie in [0, 1]"));
    }
    if objective == Objective::Classification && set.rows.iter().any(|r| r.target != 0.0 && r.target != 1.0) {
        return Err(Error::arg("classification needs binarized targets"));
    }

    let n = set.len();
    let (mean, std) = feature_moments(set);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut w = LearnedWeights::new(mean, std, hyper.hidden, &mut rng);
    let xs: Vec<[f64; FEATURE_DIM]> = set.rows.iter().map(|r| w.standardize(&r.features)).collect();
    let ts: Vec<f64> = set.rows.iter().map(|r| r.target).collect();

    let mut adam = Adam::new(w.num_params(), hyper.lr);
    let mut loss_curve = Vec::with_capacity(hyper.epochs);
    let mut log = BatchLog::new();

    let positives: Vec<usize> = (0..n).filter(|&i| ts[i] == 1.0).collect();
    let negatives: Vec<usize> = (0..n).filter(|&i| ts[i] == 0.0).collect();
    let balanced = objective == Objective::Classification
        && hyper.resample
        && !positives.is_empty()
        && !negatives.is_empty();
    let mut pos_cycle = Cycle::new(positives);
    let mut neg_cycle = Cycle::new(negatives);
    let mut perm: Vec<usize> = (0..n).collect();
    let batch = hyper.batch.min(n);
    let batches_per_epoch = n.div_ceil(batch);

    for epoch in 0..hyper.epochs {
        let mut batches: Vec<Vec<usize>> = Vec::with_capacity(batches_per_epoch);
        if balanced {
            // Inverse-frequency resampling realized per batch: half of each batch is
            // drawn from each class, cycling through shuffled class members.
            for b in 0..batches_per_epoch {
                let half = batch / 2;
                let (np, nn) = if batch % 2 == 1 && (epoch + b) % 2 == 0 {
                    (half + 1, half)
                } else {
                    (half, batch - half)
                };
                let mut idx: Vec<usize> = (0..np).map(|_| pos_cycle.next(&mut rng)).collect();
                idx.extend((0..nn).map(|_| neg_cycle.next(&mut rng)));
                idx.shuffle(&mut rng);
                batches.push(idx);
            }
        } else {
            perm.shuffle(&mut rng);
            batches.extend(perm.chunks(batch).map(<[usize]>::to_vec));
        }

        for idx in &batches {
            if objective == Objective::Classification {
                let pos = idx.iter().filter(|&&i| ts[i] == 1.0).count() as u32;
                log.push((pos, idx.len() as u32 - pos));
            }
            let mut grad = vec![0.0; w.num_params()];
            for &i in idx {
                let (_, g) = w.loss_and_grad(&xs[i], ts[i], objective);
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = 1.0 / idx.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let mut params = w.params();
            adam.step(&mut params, &grad);
            w.set_params(&params);
        }

        let loss = xs
            .iter()
            .zip(&ts)
            .map(|(x, &t)| loss_and_dz(w.forward(x).0, t, objective).0)
            .sum::<f64>()
            / n as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        loss_curve.push(loss);
    }

    let model = ScorerModel {
        kind: objective.kind(),
        weights: Some(w),
        meta: Some(TrainingMeta {
            hyper: *hyper,
            loss_curve,
        }),
    };
    Ok((model, log))
}

/// Mean loss of a learned model over a set.
pub fn evaluate_loss(model: &ScorerModel, set: &TrainingSet, objective: Objective) -> Result<f64> {
    let w = model
        .weights
        .as_ref()
        .ok_or_else(|| Error::arg("model has no weights"))?;
    if set.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    Ok(set
        .rows
        .iter()
        .map(|r| loss_and_dz(w.forward(&w.standardize(&r.features)).0, r.target, objective).0)
        .sum::<f64>()
        / set.len() as f64)
}

fn feature_moments(set: &TrainingSet) -> ([f64; FEATURE_DIM], [f64; FEATURE_DIM]) {
    let n = set.len() as f64;
    let mut mean = [0.0; FEATURE_DIM];
    for r in &set.rows {
        for k in 0..FEATURE_DIM {
            mean[k] += r.features.0[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; FEATURE_DIM];
    for r in &set.rows {
        for k in 0..FEATURE_DIM {
            var[k] += (r.features.0[k] - mean[k]).powi(2);
        }
    }
    let mut std = var.map(|v| (v / n).sqrt());
    for k in 0..FEATURE_DIM {
        if !(std[k] > 1e-12) {
            std[k] = 1.0;
        }
    }
    // The bias column passes through unchanged.
    mean[FEATURE_DIM - 1] = 0.0;
    std[FEATURE_DIM - 1] = 1.0;
    (mean, std)
}

struct Cycle {
    items: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new(items: Vec<usize>) -> Self {
        let pos = items.len();
        Cycle { items, pos }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos >= self.items.len() {
            self.items.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.items[self.pos - 1]
    }
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * grad[k];
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

const MODEL_MAGIC: &str = "treeseg-scorer";
const MODEL_VERSION: u32 = 1;

/// Serializes a model to its versioned text form. Floats use the shortest
/// representation that parses back to the same value.
pub fn format_model(model: &ScorerModel) -> String {
    let mut out = format!("{MODEL_MAGIC} {MODEL_VERSION}\nkind {}\n", model.kind);
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    if let Some(meta) = &model.meta {
        let h = &meta.hyper;
        let _ = writeln!(out, "seed {}", h.seed);
        let _ = writeln!(out, "lr {}", h.lr);
        let _ = writeln!(out, "batch {}", h.batch);
        let _ = writeln!(out, "epochs {}", h.epochs);
        let _ = writeln!(out, "resample {}", h.resample);
        let _ = writeln!(out, "hidden {}", h.hidden);
        let _ = writeln!(out, "loss {}", join(&meta.loss_curve));
    }
    if let Some(w) = &model.weights {
        let _ = writeln!(out, "features {FEATURE_DIM}");
        let _ = writeln!(out, "mean {}", join(&w.mean));
        let _ = writeln!(out, "std {}", join(&w.std));
        for row in &w.hidden {
            let _ = writeln!(out, "hidden_row {}", join(row));
        }
        let _ = writeln!(out, "output {}", join(&w.output));
    }
    out
}

pub fn parse_model(text: &str) -> Result<ScorerModel> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let perr = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
    let (l0, header) = lines.next().ok_or_else(|| perr(0, "empty model file".into()))?;
    let mut it = header.split_whitespace();
    if it.next() != Some(MODEL_MAGIC) {
        return Err(perr(l0, format!("not a scorer model (expected `{MODEL_MAGIC}`)")));
    }
    let version: u32 = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| perr(l0, "missing version".into()))?;
    if version != MODEL_VERSION {
        return Err(perr(l0, format!("unsupported model version {version}")));
    }

    let mut kind = None;
    let mut hyper = TrainHyper::default();
    let mut has_meta = false;
    let mut loss_curve = Vec::new();
    let mut mean = None;
    let mut std = None;
    let mut hidden = Vec::new();
    let mut output = None;
    for (ln, line) in lines {
        let (key, rest) = line.trim().split_once(' ').unwrap_or((line.trim(), ""));
        let floats = || -> Result<Vec<f64>> {
            rest.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| perr(ln, format!("bad number {t:?}: {e}"))))
                .collect()
        };
        let fixed = |v: Vec<f64>| -> Result<[f64; FEATURE_DIM]> {
            v.try_into()
                .map_err(|v: Vec<f64>| perr(ln, format!("expected {FEATURE_DIM} values, found {}", v.len())))
        };
        let int = |what: &str| -> Result<u64> {
            rest.trim()
                .parse()
                .map_err(|e| perr(ln, format!("bad {what} {rest:?}: {e}")))
        };
        match key {
            "kind" => kind = Some(rest.trim().parse::<ScorerKind>().map_err(|e| perr(ln, e.to_string()))?),
            "seed" => {
                hyper.seed = int("seed")?;
                has_meta = true;
            }
            "lr" => {
                hyper.lr = rest.trim().parse().map_err(|e| perr(ln, format!("bad lr: {e}")))?;
                has_meta = true;
            }
            "batch" => hyper.batch = int("batch")? as usize,
            "epochs" => hyper.epochs = int("epochs")? as usize,
            "hidden" => hyper.hidden = int("hidden")? as usize,
            "resample" => {
                hyper.resample = rest.trim().parse().map_err(|e| perr(ln, format!("bad resample flag: {e}")))?
            }
            "loss" => loss_curve = floats()?,
            "features" => {
                if int("features")? != FEATURE_DIM as u64 {
                    return Err(perr(ln, format!("model expects {rest} features, this build has {FEATURE_DIM}")));
                }
            }
            "mean" => mean = Some(fixed(floats()?)?),
            "std" => std = Some(fixed(floats()?)?),
            "hidden_row" => hidden.push(fixed(floats()?)?),
            "output" => output = Some(floats()?),
            other => return Err(perr(ln, format!("unknown model field {other:?}"))),
        }
    }
    let kind = kind.ok_or_else(|| perr(l0, "missing `kind`".into()))?;
    let weights = match (mean, std, output) {
        (Some(mean), Some(std), Some(output)) => {
            let expect = if hidden.is_empty() { FEATURE_DIM } else { hidden.len() + 1 };
            if output.len() != expect {
                return Err(perr(l0, format!("output layer has {} weights, expected {expect}", output.len())));
            }
            Some(LearnedWeights {
                mean,
                std,
                hidden,
                output,
            })
        }
        (None, None, None) => None,
        _ => return Err(perr(l0, "incomplete weight block".into())),
    };
    let model = ScorerModel {
        kind,
        weights,
        meta: has_meta.then_some(TrainingMeta { hyper, loss_curve }),
    };
    if model.is_learned() && model.weights.is_none() {
        return Err(perr(l0, "learned model without weights".into()));
    }
    Ok(model)
}

pub fn write_model(model: &ScorerModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_model(model)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ScorerModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text)
}
