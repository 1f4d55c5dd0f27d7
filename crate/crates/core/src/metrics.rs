//! Detection evaluation: greedy IoU matching, precision/recall, average
//! precision as the area under the all-points PR curve, class-averaged
//! mAP at IoU 0.5, and F1-vs-threshold tables.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::model::{corners_iou, Detection};

/// A ground-truth box in pixel corner form, for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalBox {
    pub class_id: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// TP/FP/FN tallies for one class at one operating threshold. TN is defined
/// for completeness but enters no detection formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Score-ordered match flags for one class across the dataset.
#[derive(Debug, Clone, Default)]
pub struct ClassMatches {
    /// `(score, is_true_positive)`, sorted by score descending.
    pub scored: Vec<(f64, bool)>,
    pub num_gt: usize,
}

/// Greedy score-descending matching: each detection takes the
/// highest-IoU unmatched same-class ground truth of its image when the IoU
/// reaches the threshold; otherwise it is a false positive.
pub fn match_detections(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<EvalBox>],
    iou_threshold: f64,
    num_classes: usize,
) -> Vec<ClassMatches> {
    let mut per_class: Vec<ClassMatches> = vec![ClassMatches::default(); num_classes];
    for gts in ground_truth {
        for gt in gts {
            if gt.class_id < num_classes {
                per_class[gt.class_id].num_gt += 1;
            }
        }
    }
    // (class, score, image, input order) across the dataset, score-desc with
    // deterministic tie-breaks
    let mut all: Vec<(usize, f64, usize, usize)> = Vec::new();
    for (img, dets) in detections.iter().enumerate() {
        for (k, d) in dets.iter().enumerate() {
            if d.class_id < num_classes {
                all.push((d.class_id, d.score, img, k));
            }
        }
    }
    all.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });

    let mut taken: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    for (class, score, img, k) in all {
        let det = &detections[img][k];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truth[img].iter().enumerate() {
            if gt.class_id != class || taken[img][gi] {
                continue;
            }
            let iou = corners_iou(
                (det.x1, det.y1, det.x2, det.y2),
                (gt.x1, gt.y1, gt.x2, gt.y2),
            );
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        let tp = if let Some((gi, _)) = best {
            taken[img][gi] = true;
            true
        } else {
            false
        };
        per_class[class].scored.push((score, tp));
    }
    per_class
}

impl ClassMatches {
    /// Counts at an operating threshold (detections with `score >= thr`).
    pub fn counts_at(&self, threshold: f64) -> MatchCounts {
        let mut c = MatchCounts::default();
        for &(score, tp) in &self.scored {
            if score >= threshold {
                if tp {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                }
            }
        }
        c.fn_ = self.num_gt - c.tp;
        c
    }
}

/// `Pr = TP/(TP+FP)`, `Re = TP/(TP+FN)`. An empty detector is precise
/// (0/0 -> 1); recall over an empty ground truth is 1.
pub fn precision_recall(c: &MatchCounts) -> (f64, f64) {
    let pr = if c.tp + c.fp == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let re = if c.tp + c.fn_ == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    (pr, re)
}

/// One PR-curve point and the score threshold that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// PR points at every distinct detection score, recall non-decreasing.
#[derive(Debug, Clone, Default)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub num_gt: usize,
}

pub fn pr_curve(matches: &ClassMatches) -> PrCurve {
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let n = matches.scored.len();
    for i in 0..n {
        let (score, is_tp) = matches.scored[i];
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        // emit one point per distinct score (the lowest-ranked of a tie run)
        if i + 1 < n && matches.scored[i + 1].0 == score {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = if matches.num_gt == 0 {
            0.0
        } else {
            tp as f64 / matches.num_gt as f64
        };
        points.push(PrPoint {
            threshold: score,
            recall,
            precision,
        });
    }
    PrCurve {
        points,
        num_gt: matches.num_gt,
    }
}

/// Area under the PR curve by all-points integration:
/// `AP = sum (r_i - r_{i-1}) * p_interp(r_i)` with precision interpolated
/// monotonically from the right. `None` when the class has no ground truth.
pub fn average_precision(curve: &PrCurve) -> Option<f64> {
    if curve.num_gt == 0 {
        return None;
    }
    let n = curve.points.len();
    // precision envelope from the right
    let mut envelope = vec![0.0f64; n];
    let mut run = 0.0f64;
    for i in (0..n).rev() {
        run = run.max(curve.points[i].precision);
        envelope[i] = run;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        let r = curve.points[i].recall;
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    Some(ap)
}

/// Arithmetic mean over classes with a defined AP.
pub fn map50(per_class_ap: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(CoreError::NoDefinedClasses);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// `F1 = 2*Pr*Re/(Pr+Re)`, zero when both are zero.
pub fn f1_score(pr: f64, re: f64) -> f64 {
    if pr + re == 0.0 {
        0.0
    } else {
        2.0 * pr * re / (pr + re)
    }
}

/// F1 swept over a fixed threshold grid, per class and mean.
#[derive(Debug, Clone)]
pub struct F1Table {
    pub thresholds: Vec<f64>,
    /// `[class][threshold]`
    pub per_class: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

pub fn f1_table(matches: &[ClassMatches]) -> F1Table {
    let thresholds: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let per_class: Vec<Vec<f64>> = matches
        .iter()
        .map(|m| {
            thresholds
                .iter()
                .map(|&t| {
                    let (pr, re) = precision_recall(&m.counts_at(t));
                    f1_score(pr, re)
                })
                .collect()
        })
        .collect();
    let mean = (0..thresholds.len())
        .map(|ti| {
            let vals: Vec<f64> = per_class.iter().map(|c| c[ti]).collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        })
        .collect();
    F1Table {
        thresholds,
        per_class,
        mean,
    }
}

/// Per-class evaluation summary.
#[derive(Debug, Clone)]
pub struct ClassEval {
    pub class_id: usize,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub curve: PrCurve,
}

/// Full evaluation report at IoU 0.5.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub classes: Vec<ClassEval>,
    pub map50: f64,
    /// Micro-averaged over all classes at the operating threshold.
    pub precision: f64,
    pub recall: f64,
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub f1: F1Table,
}

/// Matches, per-class APs, operating-point precision/recall, and F1 sweep in
/// one pass.
pub fn evaluate(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<EvalBox>],
    num_classes: usize,
    iou_threshold: f64,
    conf_threshold: f64,
) -> Result<EvalReport> {
    let matches = match_detections(detections, ground_truth, iou_threshold, num_classes);
    let mut classes = Vec::with_capacity(num_classes);
    let mut total = MatchCounts::default();
    let mut aps = Vec::with_capacity(num_classes);
    for (class_id, m) in matches.iter().enumerate() {
        let curve = pr_curve(m);
        let ap = average_precision(&curve);
        let counts = m.counts_at(conf_threshold);
        let (precision, recall) = precision_recall(&counts);
        total.tp += counts.tp;
        total.fp += counts.fp;
        total.fn_ += counts.fn_;
        aps.push(ap);
        classes.push(ClassEval {
            class_id,
            ap,
            num_gt: m.num_gt,
            counts,
            precision,
            recall,
            curve,
        });
    }
    let (precision, recall) = precision_recall(&total);
    Ok(EvalReport {
        classes,
        map50: map50(&aps)?,
        precision,
        recall,
        conf_threshold,
        iou_threshold,
        f1: f1_table(&matches),
    })
}
