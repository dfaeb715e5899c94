//! Per-scan open-world panoptic inference: select thing/other points, build
//! segmentation forests, score and cut them, number the resulting instances
//! and harmonize semantics inside each instance.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lidar_io::{LabelMap, LabelSpace, PointCloud};
use crate::objectness::{check_context, score, ScorerModel, ScoringContext};
use crate::segtree::{tree_cut, validate_schedule, SegForest, DEFAULT_SCHEDULE};
use crate::vocab::{Vocabulary, IGNORE_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SegmentationMode {
    /// One forest over all thing and other points.
    #[default]
    Agnostic,
    /// One forest per predicted class; `other` is a single class.
    Specific,
}

impl fmt::Display for SegmentationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegmentationMode::Agnostic => "agnostic",
            SegmentationMode::Specific => "specific",
        })
    }
}

impl FromStr for SegmentationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agnostic" | "class-agnostic" => Ok(SegmentationMode::Agnostic),
            "specific" | "class-specific" => Ok(SegmentationMode::Specific),
            _ => Err(Error::arg(format!("unknown mode {s:?} (expected agnostic or specific)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOptions {
    pub mode: SegmentationMode,
    pub schedule: Vec<f64>,
    pub min_pts: usize,
    pub majority_vote: bool,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            mode: SegmentationMode::Agnostic,
            schedule: DEFAULT_SCHEDULE.to_vec(),
            min_pts: 1,
            majority_vote: true,
        }
    }
}

/// Vocabulary-space semantic class and instance id per point. Instance ids
/// are `1..=M` for segmented points and 0 elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticPrediction {
    pub semantic: Vec<u32>,
    pub instance: Vec<u32>,
}

impl PanopticPrediction {
    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    pub fn num_instances(&self) -> u32 {
        self.instance.iter().copied().max().unwrap_or(0)
    }

    /// Point indices of each instance, indexed by `id - 1`.
    pub fn instances(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_instances() as usize];
        for (p, &id) in self.instance.iter().enumerate() {
            if id > 0 {
                out[id as usize - 1].push(p as u32);
            }
        }
        out
    }

    pub fn to_label_map(&self) -> LabelMap {
        LabelMap {
            semantic: self.semantic.clone(),
            instance: self.instance.clone(),
            space: LabelSpace::Vocab,
        }
    }

    pub fn from_label_map(labels: &LabelMap) -> Self {
        PanopticPrediction {
            semantic: labels.semantic.clone(),
            instance: labels.instance.clone(),
        }
    }
}

/// Diagnostics collected alongside a prediction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentStats {
    pub forests: usize,
    pub nodes: usize,
    pub instances: usize,
    /// Worst score among the selected segments of each forest.
    pub global_scores: Vec<f64>,
}

pub fn segment_scan(
    cloud: &PointCloud,
    semantics: &LabelMap,
    vocab: &Vocabulary,
    scorer: &ScorerModel,
    ctx: &ScoringContext,
    opts: &SegmentOptions,
) -> Result<PanopticPrediction> {
    segment_scan_with_stats(cloud, semantics, vocab, scorer, ctx, opts).map(|(p, _)| p)
}

pub fn segment_scan_with_stats(
    cloud: &PointCloud,
    semantics: &LabelMap,
    vocab: &Vocabulary,
    scorer: &ScorerModel,
    ctx: &ScoringContext,
    opts: &SegmentOptions,
) -> Result<(PanopticPrediction, SegmentStats)> {
    let n = cloud.len();
    if semantics.len() != n {
        return Err(Error::LengthMismatch {
            expected: n as u64,
            found: semantics.len() as u64,
        });
    }
    if semantics.space != LabelSpace::Vocab {
        return Err(Error::arg("semantic input must be in vocabulary space"));
    }
    if let Some((i, &c)) = semantics
        .semantic
        .iter()
        .enumerate()
        .find(|(_, &c)| c != IGNORE_ID && vocab.class(c).is_none())
    {
        return Err(Error::IdOverflow {
            index: i,
            field: "semantic",
            value: c,
        });
    }
    validate_schedule(&opts.schedule)?;
    check_context(scorer, ctx)?;

    let mut masks: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (p, &c) in semantics.semantic.iter().enumerate() {
        if c == IGNORE_ID || !vocab.has_instances(c) {
            continue;
        }
        let key = match opts.mode {
            SegmentationMode::Agnostic => 0,
            SegmentationMode::Specific => c,
        };
        masks.entry(key).or_default().push(p as u32);
    }

    let mut stats = SegmentStats::default();
    let mut segments: Vec<Vec<u32>> = Vec::new();
    for mask in masks.values() {
        let mut forest = SegForest::build(&cloud.points, mask, &opts.schedule, opts.min_pts)?;
        forest.score_nodes(|_, seg| score(scorer, &cloud.points, seg, ctx))?;
        let cut = tree_cut(&forest)?;
        stats.forests += 1;
        stats.nodes += forest.len();
        stats.global_scores.push(cut.global_score);
        segments.extend(cut.segments);
    }
    segments.sort_by_key(|s| s[0]);
    stats.instances = segments.len();

    let mut instance = vec![0u32; n];
    for (k, seg) in segments.iter().enumerate() {
        for &p in seg {
            instance[p as usize] = k as u32 + 1;
        }
    }
    let mut pred = PanopticPrediction {
        semantic: semantics.semantic.clone(),
        instance,
    };
    if opts.majority_vote {
        pred = majority_vote(&pred);
    }
    Ok((pred, stats))
}

/// Replaces the semantics of every instance by its most frequent class,
/// ties going to the smallest class id. Points without an instance keep theirs.
pub fn majority_vote(pred: &PanopticPrediction) -> PanopticPrediction {
    let m = pred.num_instances() as usize;
    let mut counts: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); m];
    for (&id, &c) in pred.instance.iter().zip(&pred.semantic) {
        if id > 0 {
            *counts[id as usize - 1].entry(c).or_default() += 1;
        }
    }
    let winners: Vec<u32> = counts
        .iter()
        .map(|c| {
            // BTreeMap iterates ascending, so the first maximum is the smallest id
            c.iter()
                .fold((0u32, 0usize), |best, (&k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect();
    let semantic = pred
        .instance
        .iter()
        .zip(&pred.semantic)
        .map(|(&id, &c)| if id > 0 { winners[id as usize - 1] } else { c })
        .collect();
    PanopticPrediction {
        semantic,
        instance: pred.instance.clone(),
    }
}
