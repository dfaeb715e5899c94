//! Open-world panoptic evaluation.
//!
//! Per scan, predictions are matched to ground truth class by class and the
//! raw counts are kept in a [`ScanEval`]. Counts from many scans are summed
//! by [`aggregate_report`] before any rate is computed.
//!
//! Points whose ground-truth class is the ignore id take no part in any metric.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lidar_io::LabelMap;
use crate::pipeline::PanopticPrediction;
use crate::vocab::{ClassKind, Vocabulary, IGNORE_ID};

/// Matching threshold; a pair matches when its IoU is strictly greater.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub class: u32,
    /// `(pred id, gt id, iou)`, sorted by pred id. Stuff regions use id 0.
    pub tp: Vec<(u32, u32, f64)>,
    pub fp: u64,
    pub fn_: u64,
}

impl MatchSet {
    pub fn iou_sum(&self) -> f64 {
        self.tp.iter().map(|t| t.2).sum()
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts {
            tp: self.tp.len() as u64,
            fp: self.fp,
            fn_: self.fn_,
            iou_sum: self.iou_sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl ClassCounts {
    fn add(&mut self, o: &ClassCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// `None` when the class has neither predictions nor ground truth.
pub fn pq_sq_rq(c: &ClassCounts) -> Option<Quality> {
    if c.tp + c.fp + c.fn_ == 0 {
        return None;
    }
    let tp = c.tp as f64;
    let sq = if c.tp == 0 { 0.0 } else { c.iou_sum / tp };
    let rq = tp / (tp + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64);
    Some(Quality { pq: sq * rq, sq, rq })
}

fn check_class(vocab: &Vocabulary, class: u32) -> Result<()> {
    if vocab.class(class).is_none() {
        return Err(Error::arg(format!(
            "class {class} outside 1..={}",
            vocab.num_classes()
        )));
    }
    Ok(())
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch {
            expected: b as u64,
            found: a as u64,
        });
    }
    Ok(())
}

/// Matches predicted segments of `class` to ground-truth segments of `class`.
/// Thing and other classes are segmented by instance id (0 means no
/// segment); a stuff class is one region per side.
pub fn match_instances(pred: &PanopticPrediction, gt: &LabelMap, class: u32, vocab: &Vocabulary) -> Result<MatchSet> {
    check_class(vocab, class)?;
    check_lengths(pred.len(), gt.len())?;
    let by_instance = vocab.has_instances(class);
    let seg_id = |sem: u32, inst: u32| -> Option<u32> {
        if sem != class {
            None
        } else if by_instance {
            (inst > 0).then_some(inst)
        } else {
            Some(0)
        }
    };
    let mut psize: BTreeMap<u32, u64> = BTreeMap::new();
    let mut gsize: BTreeMap<u32, u64> = BTreeMap::new();
    let mut inter: HashMap<(u32, u32), u64> = HashMap::new();
    for p in 0..gt.len() {
        if gt.semantic[p] == IGNORE_ID {
            continue;
        }
        let ps = seg_id(pred.semantic[p], pred.instance[p]);
        let gs = seg_id(gt.semantic[p], gt.instance[p]);
        if let Some(a) = ps {
            *psize.entry(a).or_default() += 1;
        }
        if let Some(b) = gs {
            *gsize.entry(b).or_default() += 1;
        }
        if let (Some(a), Some(b)) = (ps, gs) {
            *inter.entry((a, b)).or_default() += 1;
        }
    }
    let mut tp: Vec<(u32, u32, f64)> = inter
        .into_iter()
        .filter_map(|((a, b), i)| {
            let iou = i as f64 / (psize[&a] + gsize[&b] - i) as f64;
            (iou > MATCH_IOU).then_some((a, b, iou))
        })
        .collect();
    tp.sort_by_key(|t| (t.0, t.1));
    Ok(MatchSet {
        class,
        fp: (psize.len() - tp.len()) as u64,
        fn_: (gsize.len() - tp.len()) as u64,
        tp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UnknownCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
    pub predictions: u64,
}

impl UnknownCounts {
    fn add(&mut self, o: &UnknownCounts) {
        self.tp += o.tp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
        self.predictions += o.predictions;
    }

    /// `(uq, recall, sq)`; all 0 without ground-truth unknowns.
    pub fn rates(&self) -> (f64, f64, f64) {
        let recall = if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        let sq = if self.tp == 0 { 0.0 } else { self.iou_sum / self.tp as f64 };
        (sq * recall, recall, sq)
    }
}

/// Recall-based quality of unknown-object segments. Points in `unlabeled`
/// are stripped from predictions first; unmatched predictions cost nothing.
pub fn unknown_quality(pred: &[Vec<u32>], gt: &[Vec<u32>], unlabeled: &[bool]) -> UnknownCounts {
    let mut owner: HashMap<u32, usize> = HashMap::new();
    for (g, seg) in gt.iter().enumerate() {
        for &p in seg {
            owner.insert(p, g);
        }
    }
    let mut matched = vec![false; gt.len()];
    let mut out = UnknownCounts {
        predictions: pred.len() as u64,
        ..UnknownCounts::default()
    };
    for seg in pred {
        let kept: Vec<u32> = seg
            .iter()
            .copied()
            .filter(|&p| !unlabeled.get(p as usize).copied().unwrap_or(false))
            .collect();
        let mut inter: BTreeMap<usize, u64> = BTreeMap::new();
        for p in &kept {
            if let Some(&g) = owner.get(p) {
                *inter.entry(g).or_default() += 1;
            }
        }
        for (g, i) in inter {
            let iou = i as f64 / (kept.len() as u64 + gt[g].len() as u64 - i) as f64;
            if iou > MATCH_IOU && !matched[g] {
                matched[g] = true;
                out.tp += 1;
                out.iou_sum += iou;
            }
        }
    }
    out.fn_ = (gt.len() as u64) - out.tp;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub ground_truth: u64,
}

impl IouCounts {
    /// `None` when the class appears on neither side.
    pub fn iou(&self) -> Option<f64> {
        let union = self.predicted + self.ground_truth - self.intersection;
        (union > 0).then(|| self.intersection as f64 / union as f64)
    }

    fn add(&mut self, o: &IouCounts) {
        self.intersection += o.intersection;
        self.predicted += o.predicted;
        self.ground_truth += o.ground_truth;
    }
}

pub fn iou_counts(pred_sem: &[u32], gt_sem: &[u32], vocab: &Vocabulary) -> Result<Vec<IouCounts>> {
    check_lengths(pred_sem.len(), gt_sem.len())?;
    let mut out = vec![IouCounts::default(); vocab.num_classes()];
    for (&p, &g) in pred_sem.iter().zip(gt_sem) {
        if g == IGNORE_ID {
            continue;
        }
        if let Some(c) = out.get_mut(g as usize - 1) {
            c.ground_truth += 1;
            if p == g {
                c.intersection += 1;
            }
        }
        if p != IGNORE_ID {
            if let Some(c) = out.get_mut(p as usize - 1) {
                c.predicted += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouResult {
    /// Per class `1..=K+1`, `None` where the class appears on neither side.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in the ground truth, `other` included.
    pub miou: f64,
    pub known_miou: f64,
    pub other_iou: Option<f64>,
}

fn miou_from_counts(counts: &[IouCounts], vocab: &Vocabulary) -> MiouResult {
    let per_class: Vec<Option<f64>> = counts.iter().map(IouCounts::iou).collect();
    let mean = |ids: &mut dyn Iterator<Item = usize>| {
        let v: Vec<f64> = ids
            .filter(|&i| counts[i].ground_truth > 0)
            .map(|i| per_class[i].unwrap_or(0.0))
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let other = vocab.other_id() as usize - 1;
    MiouResult {
        miou: mean(&mut (0..counts.len())),
        known_miou: mean(&mut (0..other)),
        other_iou: per_class[other],
        per_class,
    }
}

pub fn miou(pred_sem: &[u32], gt_sem: &[u32], vocab: &Vocabulary) -> Result<MiouResult> {
    Ok(miou_from_counts(&iou_counts(pred_sem, gt_sem, vocab)?, vocab))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Set when there were no predictions and precision is reported as 0.
    pub precision_undefined: bool,
}

/// Instance precision and recall pooled over the given match sets.
pub fn instance_pr<'a>(matches: impl IntoIterator<Item = &'a ClassCounts>) -> PrecisionRecall {
    let mut c = ClassCounts::default();
    for m in matches {
        c.add(m);
    }
    let tp = c.tp as f64;
    PrecisionRecall {
        precision: if c.tp + c.fp == 0 { 0.0 } else { tp / (tp + c.fp as f64) },
        recall: if c.tp + c.fn_ == 0 { 0.0 } else { tp / (tp + c.fn_ as f64) },
        precision_undefined: c.tp + c.fp == 0,
    }
}

/// Point counts of predicted classes against ground truth, with `other`
/// split into its fine-grained source classes along the columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtendedConfusion {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ExtendedConfusion {
    fn empty(vocab: &Vocabulary) -> (Self, HashMap<u32, usize>) {
        let rows: Vec<String> = vocab.classes().iter().map(|c| c.name.clone()).collect();
        let mut columns: Vec<String> = vocab
            .classes()
            .iter()
            .filter(|c| c.kind != ClassKind::Other)
            .map(|c| c.name.clone())
            .collect();
        let mut fine = HashMap::new();
        for e in vocab.other_entries() {
            fine.insert(e.raw_id, columns.len());
            columns.push(format!("{}:{}", e.name, e.raw_id));
        }
        let counts = vec![vec![0; columns.len()]; rows.len()];
        (ExtendedConfusion { rows, columns, counts }, fine)
    }

    fn add(&mut self, o: &ExtendedConfusion) -> Result<()> {
        if self.rows != o.rows || self.columns != o.columns {
            return Err(Error::Aggregation("confusion matrices have different layouts".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<u64> {
        (0..self.columns.len())
            .map(|c| self.counts.iter().map(|r| r[c]).sum())
            .collect()
    }

    /// Each row scaled to sum to 1; empty rows stay 0.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let s: u64 = r.iter().sum();
                r.iter()
                    .map(|&v| if s == 0 { 0.0 } else { v as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

/// Rows are predicted vocabulary classes; ground truth is given in raw ids.
/// Points predicted as ignore, or whose raw class is ignored or unmapped, are skipped.
pub fn extended_confusion(pred_sem: &[u32], gt_raw: &[u32], vocab: &Vocabulary) -> Result<ExtendedConfusion> {
    check_lengths(pred_sem.len(), gt_raw.len())?;
    let (mut m, fine) = ExtendedConfusion::empty(vocab);
    let other = vocab.other_id();
    for (&p, &raw) in pred_sem.iter().zip(gt_raw) {
        if p == IGNORE_ID || vocab.class(p).is_none() {
            continue;
        }
        let col = match vocab.map_raw(raw) {
            Some(IGNORE_ID) | None => continue,
            Some(c) if c == other => match fine.get(&raw) {
                Some(&col) => col,
                None => continue,
            },
            Some(c) => c as usize - 1,
        };
        m.counts[p as usize - 1][col] += 1;
    }
    Ok(m)
}

/// Raw counts of one scan; everything needed to aggregate a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanEval {
    pub scan_id: String,
    pub vocab_signature: String,
    pub classes: Vec<ClassCounts>,
    pub iou: Vec<IouCounts>,
    pub unknown: UnknownCounts,
    pub confusion: Option<ExtendedConfusion>,
}

/// Evaluates one scan. `gt` is in vocabulary space; `gt_raw`, when given,
/// holds the raw semantic ids used for the extended confusion matrix.
pub fn evaluate_scan(
    scan_id: &str,
    pred: &PanopticPrediction,
    gt: &LabelMap,
    gt_raw: Option<&[u32]>,
    vocab: &Vocabulary,
) -> Result<ScanEval> {
    check_lengths(pred.len(), gt.len())?;
    for (i, &c) in pred.semantic.iter().chain(&gt.semantic).enumerate() {
        if c != IGNORE_ID && vocab.class(c).is_none() {
            return Err(Error::IdOverflow {
                index: i % gt.len().max(1),
                field: "semantic",
                value: c,
            });
        }
    }
    let classes = vocab
        .classes()
        .iter()
        .map(|c| match_instances(pred, gt, c.id, vocab).map(|m| m.counts()))
        .collect::<Result<Vec<_>>>()?;

    let other = vocab.other_id();
    let group = |sem: &[u32], inst: &[u32]| -> Vec<Vec<u32>> {
        let mut g: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for p in 0..sem.len() {
            if sem[p] == other && inst[p] > 0 {
                g.entry(inst[p]).or_default().push(p as u32);
            }
        }
        g.into_values().collect()
    };
    let unlabeled: Vec<bool> = gt.semantic.iter().map(|&c| c == IGNORE_ID).collect();
    let unknown = unknown_quality(
        &group(&pred.semantic, &pred.instance),
        &group(&gt.semantic, &gt.instance),
        &unlabeled,
    );
    let confusion = gt_raw
        .map(|raw| extended_confusion(&pred.semantic, raw, vocab))
        .transpose()?;
    Ok(ScanEval {
        scan_id: scan_id.to_string(),
        vocab_signature: vocab.signature(),
        classes,
        iou: iou_counts(&pred.semantic, &gt.semantic, vocab)?,
        unknown,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub id: u32,
    pub name: String,
    pub kind: ClassKind,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub iou: Option<f64>,
    #[serde(flatten)]
    pub counts: ClassCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnknownReport {
    pub uq: f64,
    pub recall: f64,
    pub sq: f64,
    pub iou: Option<f64>,
    #[serde(flatten)]
    pub counts: UnknownCounts,
}

/// Dataset-level report. Panoptic aggregates are class means over the known
/// classes; the `other` class is summarized by [`UnknownReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub scans: usize,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub pq_th: Option<f64>,
    pub sq_th: Option<f64>,
    pub rq_th: Option<f64>,
    pub pq_st: Option<f64>,
    pub sq_st: Option<f64>,
    pub rq_st: Option<f64>,
    pub miou: f64,
    pub known_miou: f64,
    pub precision_th: f64,
    pub recall_th: f64,
    pub precision_th_undefined: bool,
    pub unknown: UnknownReport,
    pub classes: Vec<ClassReport>,
    pub confusion: Option<ExtendedConfusion>,
}

/// Sums counts over scans, then computes every rate once.
pub fn aggregate_report(scans: &[ScanEval], vocab: &Vocabulary) -> Result<EvalReport> {
    let sig = vocab.signature();
    let k1 = vocab.num_classes();
    let mut classes = vec![ClassCounts::default(); k1];
    let mut iou = vec![IouCounts::default(); k1];
    let mut unknown = UnknownCounts::default();
    let mut confusion: Option<ExtendedConfusion> = None;
    for (i, s) in scans.iter().enumerate() {
        if s.vocab_signature != sig || s.classes.len() != k1 || s.iou.len() != k1 {
            return Err(Error::Aggregation(format!(
                "scan {:?} was evaluated with a different vocabulary",
                s.scan_id
            )));
        }
        for (a, b) in classes.iter_mut().zip(&s.classes) {
            a.add(b);
        }
        for (a, b) in iou.iter_mut().zip(&s.iou) {
            a.add(b);
        }
        unknown.add(&s.unknown);
        match (&mut confusion, &s.confusion) {
            (Some(a), Some(b)) => a.add(b)?,
            (None, Some(b)) if i == 0 => confusion = Some(b.clone()),
            (None, None) => {}
            _ => {
                return Err(Error::Aggregation(
                    "raw labels were available for only some scans".into(),
                ))
            }
        }
    }

    let mi = miou_from_counts(&iou, vocab);
    let quality: Vec<Option<Quality>> = classes.iter().map(pq_sq_rq).collect();
    let mean = |kind: Option<ClassKind>, f: fn(&Quality) -> f64| -> Option<f64> {
        let v: Vec<f64> = vocab
            .classes()
            .iter()
            .filter(|c| c.kind != ClassKind::Other && kind.is_none_or(|k| k == c.kind))
            .filter_map(|c| quality[c.id as usize - 1].as_ref().map(f))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let pr = instance_pr(
        vocab
            .classes()
            .iter()
            .filter(|c| c.kind == ClassKind::Thing)
            .map(|c| &classes[c.id as usize - 1]),
    );
    let (uq, recall, usq) = unknown.rates();
    let class_reports = vocab
        .classes()
        .iter()
        .map(|c| {
            let i = c.id as usize - 1;
            ClassReport {
                id: c.id,
                name: c.name.clone(),
                kind: c.kind,
                pq: quality[i].map(|q| q.pq),
                sq: quality[i].map(|q| q.sq),
                rq: quality[i].map(|q| q.rq),
                iou: mi.per_class[i],
                counts: classes[i],
            }
        })
        .collect();
    let th = Some(ClassKind::Thing);
    let st = Some(ClassKind::Stuff);
    Ok(EvalReport {
        scans: scans.len(),
        pq: mean(None, |q| q.pq),
        sq: mean(None, |q| q.sq),
        rq: mean(None, |q| q.rq),
        pq_th: mean(th, |q| q.pq),
        sq_th: mean(th, |q| q.sq),
        rq_th: mean(th, |q| q.rq),
        pq_st: mean(st, |q| q.pq),
        sq_st: mean(st, |q| q.sq),
        rq_st: mean(st, |q| q.rq),
        miou: mi.miou,
        known_miou: mi.known_miou,
        precision_th: pr.precision,
        recall_th: pr.recall,
        precision_th_undefined: pr.precision_undefined,
        unknown: UnknownReport {
            uq,
            recall,
            sq: usq,
            iou: mi.other_iou,
            counts: unknown,
        },
        classes: class_reports,
        confusion,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned plain-text rendering; values in percent.
    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut out = String::new();
        let _ = writeln!(out, "scans: {}", self.scans);
        let summary = [
            ("PQ", self.pq),
            ("SQ", self.sq),
            ("RQ", self.rq),
            ("PQ_th", self.pq_th),
            ("PQ_st", self.pq_st),
            ("mIoU", Some(self.miou)),
            ("Prec_th", Some(self.precision_th)),
            ("Rec_th", Some(self.recall_th)),
            ("UQ", Some(self.unknown.uq)),
            ("Rec_unk", Some(self.unknown.recall)),
            ("SQ_unk", Some(self.unknown.sq)),
            ("IoU_unk", self.unknown.iou),
        ];
        let head: Vec<String> = summary.iter().map(|(k, _)| format!("{k:>8}")).collect();
        let vals: Vec<String> = summary.iter().map(|(_, v)| format!("{:>8}", pct(*v))).collect();
        let _ = writeln!(out, "{}", head.join(" "));
        let _ = writeln!(out, "{}", vals.join(" "));
        if self.precision_th_undefined {
            let _ = writeln!(out, "(no thing predictions: precision reported as 0)");
        }
        let _ = writeln!(out);
        let w = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            out,
            "{:>3} {:<w$} {:<5} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "id", "class", "kind", "PQ", "SQ", "RQ", "IoU", "TP", "FP", "FN"
        );
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:>3} {:<w$} {:<5} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
                c.id,
                c.name,
                c.kind.to_string(),
                pct(c.pq),
                pct(c.sq),
                pct(c.rq),
                pct(c.iou),
                c.counts.tp,
                c.counts.fp,
                c.counts.fn_
            );
        }
        if let Some(m) = &self.confusion {
            let _ = writeln!(out, "\nconfusion (rows: predicted, columns: ground truth)");
            let rw = m.rows.iter().map(String::len).max().unwrap_or(0);
            let cw: Vec<usize> = m
                .columns
                .iter()
                .enumerate()
                .map(|(j, c)| c.len().max(m.counts.iter().map(|r| r[j].to_string().len()).max().unwrap_or(1)))
                .collect();
            let mut line = format!("{:<rw$}", "");
            for (c, w) in m.columns.iter().zip(&cw) {
                let _ = write!(line, " {c:>w$}");
            }
            let _ = writeln!(out, "{line}");
            for (name, row) in m.rows.iter().zip(&m.counts) {
                let mut line = format!("{name:<rw$}");
                for (v, w) in row.iter().zip(&cw) {
                    let _ = write!(line, " {v:>w$}");
                }
                let _ = writeln!(out, "{line}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar_io::LabelSpace;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::bundled("vocab1").unwrap()
    }

    fn id_of(v: &Vocabulary, name: &str) -> u32 {
        v.classes().iter().find(|c| c.name == name).unwrap().id
    }

    fn gt(sem: Vec<u32>, inst: Vec<u32>) -> LabelMap {
        LabelMap::new(sem, inst, LabelSpace::Vocab).unwrap()
    }

    #[test]
    fn match_overlap_examples() {
        let v = vocab();
        let car = id_of(&v, "car");
        // pred covers 0..100, gt covers 20..120 → 80 shared of 120
        let n = 120;
        let pred = PanopticPrediction {
            semantic: vec![car; n],
            instance: (0..n).map(|p| if p < 100 { 1 } else { 0 }).collect(),
        };
        let g = gt(vec![car; n], (0..n).map(|p| if p >= 20 { 7 } else { 0 }).collect());
        let m = match_instances(&pred, &g, car, &v).unwrap();
        assert_eq!(m.tp.len(), 1);
        assert!((m.tp[0].2 - 80.0 / 120.0).abs() < 1e-12);
        let q = pq_sq_rq(&m.counts()).unwrap();
        assert!((q.sq - 2.0 / 3.0).abs() < 1e-12 && q.rq == 1.0 && (q.pq - 2.0 / 3.0).abs() < 1e-12);

        // 50 shared of 150 → below threshold
        let n = 150;
        let pred = PanopticPrediction {
            semantic: vec![car; n],
            instance: (0..n).map(|p| if p < 100 { 1 } else { 0 }).collect(),
        };
        let g = gt(vec![car; n], (0..n).map(|p| if p >= 50 { 3 } else { 0 }).collect());
        let m = match_instances(&pred, &g, car, &v).unwrap();
        assert_eq!((m.tp.len(), m.fp, m.fn_), (0, 1, 1));

        let empty = PanopticPrediction { semantic: vec![0; 4], instance: vec![0; 4] };
        let g = gt(vec![car; 4], vec![1, 1, 2, 2]);
        let m = match_instances(&empty, &g, car, &v).unwrap();
        assert_eq!((m.tp.len(), m.fp, m.fn_), (0, 0, 2));
        assert!(match_instances(&empty, &g, 99, &v).is_err());
    }

    #[test]
    fn stuff_is_one_region_and_ignore_is_dropped() {
        let v = vocab();
        let road = id_of(&v, "road");
        let pred = PanopticPrediction { semantic: vec![road; 6], instance: vec![0; 6] };
        // GT: 3 road, 3 ignored → after dropping ignore, IoU = 1
        let g = gt(vec![road, road, road, 0, 0, 0], vec![5, 6, 7, 0, 0, 0]);
        let m = match_instances(&pred, &g, road, &v).unwrap();
        assert_eq!(m.tp, vec![(0, 0, 1.0)]);
    }

    #[test]
    fn quality_formula_examples() {
        let q = pq_sq_rq(&ClassCounts { tp: 2, fp: 1, fn_: 1, iou_sum: 1.6 }).unwrap();
        assert!((q.rq - 2.0 / 3.0).abs() < 1e-12);
        assert!((q.sq - 0.8).abs() < 1e-12);
        assert!((q.pq - 0.8 * 2.0 / 3.0).abs() < 1e-12);
        assert!(pq_sq_rq(&ClassCounts::default()).is_none());
    }

    #[test]
    fn unknown_quality_examples() {
        // GT unknowns {0..10}, {20..30}; one pred hits the first at IoU 0.8
        let gts = vec![(0..10).collect::<Vec<u32>>(), (20..30).collect()];
        let hit: Vec<u32> = (0..8).collect();
        let preds = vec![hit.clone(), (40..45).collect(), (50..52).collect()];
        let unl = vec![false; 200];
        let c = unknown_quality(&preds, &gts, &unl);
        let (uq, recall, sq) = c.rates();
        assert_eq!(recall, 0.5);
        assert!((sq - 0.8).abs() < 1e-12 && (uq - 0.4).abs() < 1e-12);

        let mut more = preds.clone();
        more.extend((0..10).map(|k| vec![100 + k]));
        assert_eq!(unknown_quality(&more, &gts, &unl).rates(), c.rates());

        // pred = GT (10 pts) plus 15 unlabeled points: IoU 10/25 before stripping, 1 after
        let covering: Vec<u32> = (0..10).chain(100..115).collect();
        let mut unl = vec![false; 200];
        (100..115).for_each(|p| unl[p] = true);
        let c = unknown_quality(&[covering.clone()], &gts[..1], &unl);
        assert_eq!(c.tp, 1);
        let c = unknown_quality(&[covering], &gts[..1], &vec![false; 200]);
        assert_eq!(c.tp, 0);
    }

    #[test]
    fn miou_examples() {
        let v = vocab();
        let (a, b) = (id_of(&v, "car"), id_of(&v, "road"));
        // A: 50 gt, 50 pred, 25 overlap
        let mut gt_sem = vec![a; 50];
        gt_sem.extend(vec![b; 50]);
        let mut pred = vec![a; 25];
        pred.extend(vec![b; 25]);
        pred.extend(vec![a; 25]);
        pred.extend(vec![b; 25]);
        let r = miou(&pred, &gt_sem, &v).unwrap();
        assert!((r.per_class[a as usize - 1].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class[id_of(&v, "fence") as usize - 1], None);
        assert!((r.miou - 1.0 / 3.0).abs() < 1e-12);
        let perfect = miou(&gt_sem, &gt_sem, &v).unwrap();
        assert_eq!(perfect.miou, 1.0);
    }

    #[test]
    fn precision_recall_examples() {
        let c = ClassCounts { tp: 8, fp: 2, fn_: 2, iou_sum: 0.0 };
        let pr = instance_pr([&c]);
        assert!((pr.precision - 0.8).abs() < 1e-12 && (pr.recall - 0.8).abs() < 1e-12);
        let none = instance_pr([&ClassCounts { tp: 0, fp: 0, fn_: 3, iou_sum: 0.0 }]);
        assert!(none.precision_undefined && none.precision == 0.0);
        let all = instance_pr([&ClassCounts { tp: 3, fp: 0, fn_: 0, iou_sum: 2.0 }]);
        assert_eq!((all.precision, all.recall), (1.0, 1.0));
    }

    #[test]
    fn confusion_examples() {
        let v = Vocabulary::bundled("vocab1-kitti360").unwrap();
        let car = id_of(&v, "car");
        let trailer = v.other_entries().find(|e| e.name == "trailer").unwrap().raw_id;
        let car_raw = v.entries().find(|e| e.class_id == car).unwrap().raw_id;
        let raw = vec![car_raw, car_raw, trailer, trailer, trailer];
        let pred = vec![car; 5];
        let m = extended_confusion(&pred, &raw, &v).unwrap();
        let tcol = m.columns.iter().position(|c| c.starts_with("trailer:")).unwrap();
        assert_eq!(m.counts[car as usize - 1][tcol], 3);
        assert_eq!(m.counts[car as usize - 1][car as usize - 1], 2);
        let sums = m.column_sums();
        assert_eq!(sums[tcol], 3);
        assert_eq!(sums.iter().sum::<u64>(), 5);
    }

    #[test]
    fn aggregation_sums_counts() {
        let v = vocab();
        let car = id_of(&v, "car");
        let scan = |inst_gt: Vec<u32>, inst_pred: Vec<u32>| {
            let n = inst_gt.len();
            let pred = PanopticPrediction { semantic: vec![car; n], instance: inst_pred };
            evaluate_scan("s", &pred, &gt(vec![car; n], inst_gt), None, &v).unwrap()
        };
        // scan A: GT {0..5},{5..10}; pred covers 3 of first (IoU 0.6) → TP 1, FN 1
        let a = scan(vec![1, 1, 1, 1, 1, 2, 2, 2, 2, 2], vec![1, 1, 1, 0, 0, 0, 0, 0, 0, 0]);
        // scan B: GT {0..5}; pred covers 4 → IoU 0.8
        let b = scan(vec![1, 1, 1, 1, 1], vec![1, 1, 1, 1, 0]);
        let r = aggregate_report(&[a.clone(), b], &v).unwrap();
        let c = &r.classes[car as usize - 1];
        assert!((c.rq.unwrap() - 2.0 / 2.5).abs() < 1e-12);
        assert!((c.sq.unwrap() - 0.7).abs() < 1e-12);

        let single = aggregate_report(std::slice::from_ref(&a), &v).unwrap();
        let q = pq_sq_rq(&a.classes[car as usize - 1]).unwrap();
        assert_eq!(single.classes[car as usize - 1].pq, Some(q.pq));

        let mut foreign = a;
        foreign.vocab_signature = "x".into();
        assert!(matches!(aggregate_report(&[foreign], &v), Err(Error::Aggregation(_))));
    }

    #[test]
    fn report_renders_deterministically() {
        let v = vocab();
        let car = id_of(&v, "car");
        let pred = PanopticPrediction { semantic: vec![car; 4], instance: vec![1, 1, 2, 2] };
        let g = gt(vec![car; 4], vec![1, 1, 2, 2]);
        let s = evaluate_scan("s", &pred, &g, Some(&[10, 10, 10, 10]), &v).unwrap();
        let r = aggregate_report(&[s], &v).unwrap();
        assert_eq!(r.to_json(), r.clone().to_json());
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["pq"], 1.0);
        assert!(r.to_text().contains("car"));
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, car: u32) -> (PanopticPrediction, LabelMap) {
        let pred = PanopticPrediction {
            semantic: (0..n).map(|_| if rng.gen_bool(0.8) { car } else { 0 }).collect(),
            instance: (0..n).map(|_| rng.gen_range(0..5)).collect(),
        };
        let g = gt(
            (0..n).map(|_| if rng.gen_bool(0.9) { car } else { 0 }).collect(),
            (0..n).map(|_| rng.gen_range(0..4)).collect(),
        );
        (pred, g)
    }

    #[test]
    fn randomized_matching_properties() {
        let v = vocab();
        let car = id_of(&v, "car");
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let n = rng.gen_range(1..40);
            let (pred, g) = random_scene(&mut rng, n, car);
            let m = match_instances(&pred, &g, car, &v).unwrap();
            let mut ps: Vec<u32> = m.tp.iter().map(|t| t.0).collect();
            let mut gs: Vec<u32> = m.tp.iter().map(|t| t.1).collect();
            ps.dedup();
            gs.sort_unstable();
            gs.dedup();
            assert_eq!(ps.len(), m.tp.len());
            assert_eq!(gs.len(), m.tp.len());
            assert!(m.tp.iter().all(|t| t.2 > MATCH_IOU));
            if let Some(q) = pq_sq_rq(&m.counts()) {
                assert!((q.pq - q.sq * q.rq).abs() < 1e-12);
            }

            // swap sides over the points both label as valid
            let both: Vec<usize> = (0..n).filter(|&p| g.semantic[p] != 0 && pred.semantic[p] != 0).collect();
            let sub_pred = PanopticPrediction {
                semantic: both.iter().map(|&p| pred.semantic[p]).collect(),
                instance: both.iter().map(|&p| pred.instance[p]).collect(),
            };
            let sub_gt = gt(both.iter().map(|&p| g.semantic[p]).collect(), both.iter().map(|&p| g.instance[p]).collect());
            let fwd = match_instances(&sub_pred, &sub_gt, car, &v).unwrap();
            let back = match_instances(
                &PanopticPrediction::from_label_map(&sub_gt),
                &sub_pred.to_label_map(),
                car,
                &v,
            )
            .unwrap();
            assert_eq!((fwd.fp, fwd.fn_), (back.fn_, back.fp));
            assert!((fwd.iou_sum() - back.iou_sum()).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn self_miou_is_one(sem in proptest::collection::vec(0u32..=10, 1..80)) {
            let v = vocab();
            let r = miou(&sem, &sem, &v).unwrap();
            for (i, x) in r.per_class.iter().enumerate() {
                if sem.contains(&(i as u32 + 1)) {
                    proptest::prop_assert_eq!(*x, Some(1.0));
                }
            }
        }

        #[test]
        fn extra_unknown_predictions_change_nothing(
            extra in proptest::collection::vec(proptest::collection::vec(0u32..60, 1..10), 0..10)
        ) {
            let gts = vec![(0..10).collect::<Vec<u32>>(), (20..30).collect()];
            let base = vec![(0..9).collect::<Vec<u32>>()];
            let unl = vec![false; 60];
            let a = unknown_quality(&base, &gts, &unl);
            let mut more = base.clone();
            // extra segments disjoint from GT unknowns cannot match
            more.extend(extra.into_iter().map(|s| s.into_iter().map(|p| p + 100).collect()));
            let b = unknown_quality(&more, &gts, &unl);
            proptest::prop_assert_eq!(a.rates(), b.rates());
        }
    }
}
