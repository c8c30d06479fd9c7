//! Segmentation, classification and loop-level metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;
use crate::regression::{classify_referable, TraceRecord};
use crate::vlcore::PredictionRecord;
use crate::{LESION_NAMES, NUM_CLASSES, NUM_GRADES, NUM_LESIONS};

/// Pixel counts of one prediction/ground-truth comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl SegCounts {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Self {
        assert_eq!(pred.dims(), gt.dims(), "mask shape mismatch");
        let mut c = Self::default();
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        c
    }

    pub fn add(&mut self, other: SegCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Percent-scale scores. Sensitivity is `None` when the ground truth is
    /// empty; IoU and Dice are then 100 for an empty prediction and 0 otherwise.
    pub fn scores(&self) -> SegScore {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if self.tp + self.fn_ == 0 {
            let v = if self.fp == 0 { 100.0 } else { 0.0 };
            return SegScore {
                sensitivity: None,
                iou: v,
                dice: v,
            };
        }
        SegScore {
            sensitivity: Some(100.0 * tp / (tp + fn_)),
            iou: 100.0 * tp / (tp + fp + fn_),
            dice: 100.0 * 2.0 * tp / (2.0 * tp + fp + fn_),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub sensitivity: Option<f64>,
    pub iou: f64,
    pub dice: f64,
}

pub fn seg_metrics(pred: &BinaryMask, gt: &BinaryMask) -> SegScore {
    SegCounts::of(pred, gt).scores()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSeg {
    pub class: String,
    pub counts: SegCounts,
    pub score: SegScore,
}

/// Class-mean scores; sensitivity averages only classes where it is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSeg {
    pub sensitivity: Option<f64>,
    pub iou: f64,
    pub dice: f64,
}

fn mean_of(scores: &[SegScore]) -> MeanSeg {
    let sens: Vec<f64> = scores.iter().filter_map(|s| s.sensitivity).collect();
    let n = scores.len() as f64;
    MeanSeg {
        sensitivity: (!sens.is_empty()).then(|| sens.iter().sum::<f64>() / sens.len() as f64),
        iou: scores.iter().map(|s| s.iou).sum::<f64>() / n,
        dice: scores.iter().map(|s| s.dice).sum::<f64>() / n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    /// Background first, then MA, HE, SE, EX.
    pub per_class: Vec<ClassSeg>,
    pub overall_without_bg: MeanSeg,
    pub overall: MeanSeg,
}

impl SegReport {
    pub fn lesion(&self, k: usize) -> &ClassSeg {
        &self.per_class[k + 1]
    }
}

/// One evaluated image: the class-agnostic predicted mask against each
/// lesion type's ground truth.
pub struct SegItem<'a> {
    pub predicted: &'a BinaryMask,
    pub lesions: &'a [BinaryMask; NUM_LESIONS],
}

/// Counts are pooled over all images before scoring. Background is the
/// complement of the lesion union on both sides.
pub fn segmentation_report(items: &[SegItem<'_>]) -> SegReport {
    let mut counts = [SegCounts::default(); NUM_LESIONS + 1];
    for item in items {
        let mut union = item.lesions[0].clone();
        for m in &item.lesions[1..] {
            union.union_in_place(m);
        }
        counts[0].add(SegCounts::of(&item.predicted.not(), &union.not()));
        for k in 0..NUM_LESIONS {
            counts[k + 1].add(SegCounts::of(item.predicted, &item.lesions[k]));
        }
    }
    let per_class: Vec<ClassSeg> = counts
        .iter()
        .enumerate()
        .map(|(i, c)| ClassSeg {
            class: if i == 0 {
                "bg".into()
            } else {
                LESION_NAMES[i - 1].into()
            },
            counts: *c,
            score: c.scores(),
        })
        .collect();
    let all: Vec<SegScore> = per_class.iter().map(|c| c.score).collect();
    SegReport {
        overall_without_bg: mean_of(&all[1..]),
        overall: mean_of(&all),
        per_class,
    }
}

/// Ground truth for classification metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub grade: usize,
    pub lesions: [bool; NUM_LESIONS],
}

impl Label {
    fn binary(&self) -> [bool; NUM_CLASSES] {
        std::array::from_fn(|c| {
            if c < NUM_GRADES {
                c == self.grade
            } else {
                self.lesions[c - NUM_GRADES]
            }
        })
    }
}

fn predicted_binary(p: &PredictionRecord) -> [bool; NUM_CLASSES] {
    std::array::from_fn(|c| {
        if c < NUM_GRADES {
            c == p.grade
        } else {
            p.lesions[c - NUM_GRADES]
        }
    })
}

pub fn class_name(c: usize) -> String {
    if c < NUM_GRADES {
        format!("grade{c}")
    } else {
        LESION_NAMES[c - NUM_GRADES].to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    /// Percent of all (image, class) binary decisions that are correct.
    pub accuracy: f64,
    /// Percent of images whose grade is exactly right.
    pub grade_accuracy: f64,
    /// Macro one-vs-rest AUC over the classes where it is defined.
    pub auc: Option<f64>,
    pub auc_per_class: Vec<Option<f64>>,
    /// Macro F1 (percent) over classes with at least one positive label.
    pub f1: Option<f64>,
    pub f1_per_class: Vec<Option<f64>>,
    pub kappa: f64,
    pub confusion: [[u64; NUM_GRADES]; NUM_GRADES],
    /// Classes left out of a macro average, with the reason.
    pub skipped: Vec<String>,
}

/// Mann-Whitney AUC with average ranks for ties. `None` without both classes.
pub fn auc_rank(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..scores.len())
        .filter(|&k| positive[k])
        .map(|k| ranks[k])
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Quadratic weighted kappa over a K×K confusion matrix (rows = truth).
pub fn quadratic_weighted_kappa<const K: usize>(confusion: &[[u64; K]; K]) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 || K < 2 {
        return 1.0;
    }
    let n = total as f64;
    let rows: Vec<f64> = confusion
        .iter()
        .map(|r| r.iter().sum::<u64>() as f64)
        .collect();
    let cols: Vec<f64> = (0..K)
        .map(|j| confusion.iter().map(|r| r[j]).sum::<u64>() as f64)
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..K {
        for j in 0..K {
            let w = ((i as f64 - j as f64) / (K as f64 - 1.0)).powi(2);
            num += w * confusion[i][j] as f64 / n;
            den += w * rows[i] * cols[j] / (n * n);
        }
    }
    if den == 0.0 {
        // Every image in one row and one column: agreement is all there is.
        return if num == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - num / den
}

pub fn classification_metrics(
    predictions: &[PredictionRecord],
    labels: &[Label],
) -> Result<ClassificationMetrics, String> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(format!(
            "need equal non-empty lists, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    let n = predictions.len();
    let truth: Vec<[bool; NUM_CLASSES]> = labels.iter().map(Label::binary).collect();
    let guess: Vec<[bool; NUM_CLASSES]> = predictions.iter().map(predicted_binary).collect();

    let correct: usize = truth
        .iter()
        .zip(&guess)
        .map(|(t, g)| t.iter().zip(g).filter(|(a, b)| a == b).count())
        .sum();
    let grade_correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p.grade == l.grade)
        .count();

    let mut skipped = Vec::new();
    let mut auc_per_class = Vec::with_capacity(NUM_CLASSES);
    let mut f1_per_class = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let pos: Vec<bool> = truth.iter().map(|t| t[c]).collect();
        let scores: Vec<f64> = predictions.iter().map(|p| p.probs[c]).collect();
        let auc = auc_rank(&scores, &pos);
        if auc.is_none() {
            skipped.push(format!(
                "{}: AUC needs positive and negative labels",
                class_name(c)
            ));
        }
        auc_per_class.push(auc);

        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (t, g) in truth.iter().zip(&guess) {
            match (g[c], t[c]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fn_ == 0 {
            skipped.push(format!("{}: F1 needs a positive label", class_name(c)));
            f1_per_class.push(None);
        } else {
            f1_per_class.push(Some(100.0 * 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64));
        }
    }
    let macro_mean = |v: &[Option<f64>]| {
        let xs: Vec<f64> = v.iter().flatten().copied().collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };

    let mut confusion = [[0u64; NUM_GRADES]; NUM_GRADES];
    for (p, l) in predictions.iter().zip(labels) {
        confusion[l.grade][p.grade] += 1;
    }
    Ok(ClassificationMetrics {
        accuracy: 100.0 * correct as f64 / (n * NUM_CLASSES) as f64,
        grade_accuracy: 100.0 * grade_correct as f64 / n as f64,
        auc: macro_mean(&auc_per_class),
        f1: macro_mean(&f1_per_class),
        auc_per_class,
        f1_per_class,
        kappa: quadratic_weighted_kappa(&confusion),
        confusion,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionCurve {
    /// Images whose entry prediction was referable.
    pub referable: usize,
    /// Entry `t - 1` is the fraction non-referable after at most `t` cycles.
    pub values: Vec<f64>,
}

/// Fraction of initially-referable images predicted non-referable by each
/// cycle. Runs as far as the longest loop.
pub fn reduction_curve(records: &[TraceRecord]) -> ReductionCurve {
    let paths: Vec<Vec<usize>> = records
        .iter()
        .map(TraceRecord::grade_path)
        .filter(|p| classify_referable(p[0]))
        .collect();
    let len = paths.iter().map(|p| p.len() - 1).max().unwrap_or(0);
    let values = (1..=len)
        .map(|t| {
            let flipped = paths
                .iter()
                .filter(|p| p[1..].iter().take(t).any(|&g| !classify_referable(g)))
                .count();
            flipped as f64 / paths.len() as f64
        })
        .collect();
    ReductionCurve {
        referable: paths.len(),
        values,
    }
}

/// Rows are label grades, columns final predicted grades.
pub fn transition_flow(labels: &[usize], finals: &[usize]) -> [[u64; NUM_GRADES]; NUM_GRADES] {
    let mut m = [[0u64; NUM_GRADES]; NUM_GRADES];
    for (&l, &f) in labels.iter().zip(finals) {
        m[l][f] += 1;
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: usize,
    /// Classification of the unmodified test images.
    pub classification: ClassificationMetrics,
    pub segmentation: SegReport,
    pub reduction_curve: ReductionCurve,
    pub transition_flow: [[u64; NUM_GRADES]; NUM_GRADES],
    /// Mean completed cycles over initially-referable images.
    pub mean_iterations: Option<f64>,
    pub notes: Vec<String>,
}

/// One row per metric and class: `metric,class,value`. Undefined values are empty.
pub fn metrics_csv(report: &MetricReport) -> String {
    let mut out = String::from("metric,class,value\n");
    let mut row = |metric: &str, class: &str, v: Option<f64>| {
        let v = v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{metric},{class},{v}");
    };
    for c in &report.segmentation.per_class {
        row("sensitivity", &c.class, c.score.sensitivity);
        row("iou", &c.class, Some(c.score.iou));
        row("dice", &c.class, Some(c.score.dice));
    }
    for (name, m) in [
        ("overall_wo_bg", &report.segmentation.overall_without_bg),
        ("overall", &report.segmentation.overall),
    ] {
        row("sensitivity", name, m.sensitivity);
        row("iou", name, Some(m.iou));
        row("dice", name, Some(m.dice));
    }
    let cls = &report.classification;
    row("accuracy", "all", Some(cls.accuracy));
    row("grade_accuracy", "all", Some(cls.grade_accuracy));
    row("auc", "macro", cls.auc);
    row("f1", "macro", cls.f1);
    row("kappa", "grade", Some(cls.kappa));
    for c in 0..NUM_CLASSES {
        row("auc", &class_name(c), cls.auc_per_class[c]);
        row("f1", &class_name(c), cls.f1_per_class[c]);
    }
    for (t, v) in report.reduction_curve.values.iter().enumerate() {
        row("reduction_rate", &format!("t{}", t + 1), Some(*v));
    }
    row("mean_iterations", "referable", report.mean_iterations);
    out
}

pub fn write_report(report: &MetricReport, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(report))?;
    let json = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    fs::write(dir.join("report.json"), json + "\n")
}
