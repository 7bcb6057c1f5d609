//! Segmentation evaluation: one-vs-rest confusion counts, IoU / Dice /
//! precision / recall / specificity, and threshold-swept PR and ROC series.
//!
//! Dataset-level numbers pool integer confusion counts over samples
//! (micro-aggregation) before any division; 0/0 ratios stay undefined
//! rather than being coerced.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::LabelGrid;
use crate::error::{invalid, shape_mismatch, Result};
use crate::tensor::GridTensor;

/// One-vs-rest pixel counts for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// Per-class one-vs-rest confusion counts over one or many samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<ClassCounts>,
}

impl ConfusionMatrix {
    pub fn zero(class_count: usize) -> Self {
        ConfusionMatrix {
            classes: vec![ClassCounts::default(); class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, c: usize) -> ClassCounts {
        self.classes[c]
    }

    pub fn classes(&self) -> &[ClassCounts] {
        &self.classes
    }

    /// Counts one prediction/truth pair of equal-shaped label grids.
    pub fn from_predictions(
        pred: &LabelGrid,
        truth: &LabelGrid,
        class_count: usize,
    ) -> Result<Self> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(shape_mismatch(
                "confusion_matrix",
                &[pred.height(), pred.width()],
                &[truth.height(), truth.width()],
            ));
        }
        pred.check_classes(class_count)?;
        truth.check_classes(class_count)?;
        let mut cm = ConfusionMatrix::zero(class_count);
        for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
            for c in 0..class_count {
                let c = c as u8;
                let counts = &mut cm.classes[c as usize];
                match (p == c, t == c) {
                    (true, true) => counts.true_pos += 1,
                    (true, false) => counts.false_pos += 1,
                    (false, true) => counts.false_neg += 1,
                    (false, false) => counts.true_neg += 1,
                }
            }
        }
        Ok(cm)
    }

    /// Component-wise addition; associative and commutative.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.classes.len() != other.classes.len() {
            return Err(invalid(format!(
                "merge: confusion matrices track {} vs {} classes",
                self.classes.len(),
                other.classes.len()
            )));
        }
        let classes = self
            .classes
            .iter()
            .zip(&other.classes)
            .map(|(a, b)| ClassCounts {
                true_pos: a.true_pos + b.true_pos,
                false_pos: a.false_pos + b.false_pos,
                false_neg: a.false_neg + b.false_neg,
                true_neg: a.true_neg + b.true_neg,
            })
            .collect();
        Ok(ConfusionMatrix { classes })
    }

    pub fn merge_in_place(&mut self, other: &ConfusionMatrix) -> Result<()> {
        *self = self.merge(other)?;
        Ok(())
    }
}

/// The five ratios for one class; 0/0 is `None` ("undefined"), not a value.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn class(&self, c: usize) -> &ClassMetrics {
        &self.classes[c]
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// IoU = TP/(TP+FP+FN), Dice = 2TP/(2TP+FP+FN), precision = TP/(TP+FP),
/// recall = TP/(TP+FN), specificity = TN/(TN+FP).
pub fn metrics_from_cm(cm: &ConfusionMatrix) -> MetricsReport {
    let classes = cm
        .classes()
        .iter()
        .map(|c| ClassMetrics {
            iou: ratio(c.true_pos, c.true_pos + c.false_pos + c.false_neg),
            dice: ratio(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg),
            precision: ratio(c.true_pos, c.true_pos + c.false_pos),
            recall: ratio(c.true_pos, c.true_pos + c.false_neg),
            specificity: ratio(c.true_neg, c.true_neg + c.false_pos),
        })
        .collect();
    MetricsReport { classes }
}

/// Fraction of correctly classified pixels. Each correct pixel is a true
/// positive for exactly its own class, so the one-vs-rest TP counts sum to
/// the number of correct pixels.
pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Option<f64> {
    let total = cm.classes().first().map(|c| c.total())?;
    if total == 0 {
        return None;
    }
    let correct: u64 = cm.classes().iter().map(|c| c.true_pos).sum();
    Some(correct as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveKind {
    /// x = recall, y = precision.
    PrecisionRecall,
    /// x = 1 - specificity, y = sensitivity.
    Roc,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// One threshold sweep for one class, plus the operating point of the hard
/// argmax predictions. Thresholds whose x or y is undefined are excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSeries {
    pub class: usize,
    pub kind: CurveKind,
    pub points: Vec<CurvePoint>,
    pub operating_point: Option<(f64, f64)>,
}

/// Uniformly spaced thresholds from 1.00 down to 0.00.
pub fn default_thresholds(count: usize) -> Vec<f64> {
    assert!(count >= 2, "threshold grid needs at least two points");
    (0..count)
        .map(|i| 1.0 - i as f64 / (count - 1) as f64)
        .collect()
}

/// Sweeps `thresholds` over the class probability (pixel positive iff
/// p >= t, one-vs-rest), pooling counts over all samples, and returns the
/// PR and ROC series.
pub fn pr_roc_curves(
    probs: &[GridTensor],
    truths: &[LabelGrid],
    class: usize,
    thresholds: &[f64],
) -> Result<(CurveSeries, CurveSeries)> {
    if probs.is_empty() {
        return Err(invalid("pr_roc_curves: no samples"));
    }
    if probs.len() != truths.len() {
        return Err(invalid(format!(
            "pr_roc_curves: {} probability fields vs {} label grids",
            probs.len(),
            truths.len()
        )));
    }
    if thresholds.is_empty() {
        return Err(invalid("pr_roc_curves: empty threshold list"));
    }
    for t in thresholds {
        if !(*t >= 0.0 && *t <= 1.0) {
            return Err(invalid(format!("threshold {t} outside [0, 1]")));
        }
    }
    if thresholds.windows(2).any(|p| p[1] >= p[0]) {
        return Err(invalid("thresholds must be strictly decreasing"));
    }

    // Pool per-threshold counts and the argmax operating point in one pass.
    let mut tp = vec![0u64; thresholds.len()];
    let mut fp = vec![0u64; thresholds.len()];
    let mut positives = 0u64;
    let mut negatives = 0u64;
    let mut op = ClassCounts::default();
    for (field, truth) in probs.iter().zip(truths) {
        let (c, h, w) = field.dims3("pr_roc_curves probabilities")?;
        if class >= c {
            return Err(invalid(format!(
                "class {class} out of range for {c}-channel probabilities"
            )));
        }
        if truth.height() != h || truth.width() != w {
            return Err(shape_mismatch(
                "pr_roc_curves",
                field.shape(),
                &[truth.height(), truth.width()],
            ));
        }
        truth.check_classes(c)?;
        for hi in 0..h {
            for wi in 0..w {
                let p = field.data()[(class * h + hi) * w + wi];
                let is_true = truth.get(hi, wi) as usize == class;
                if is_true {
                    positives += 1;
                } else {
                    negatives += 1;
                }
                for (k, &t) in thresholds.iter().enumerate() {
                    if p >= t {
                        if is_true {
                            tp[k] += 1;
                        } else {
                            fp[k] += 1;
                        }
                    }
                }
                // Hard argmax, ties to the lowest class index.
                let mut best = 0usize;
                for ci in 1..c {
                    if field.data()[(ci * h + hi) * w + wi]
                        > field.data()[(best * h + hi) * w + wi]
                    {
                        best = ci;
                    }
                }
                match (best == class, is_true) {
                    (true, true) => op.true_pos += 1,
                    (true, false) => op.false_pos += 1,
                    (false, true) => op.false_neg += 1,
                    (false, false) => op.true_neg += 1,
                }
            }
        }
    }

    let mut pr_points = Vec::new();
    let mut roc_points = Vec::new();
    for (k, &t) in thresholds.iter().enumerate() {
        let fn_k = positives - tp[k];
        let tn_k = negatives - fp[k];
        let recall = ratio(tp[k], tp[k] + fn_k);
        let precision = ratio(tp[k], tp[k] + fp[k]);
        let specificity = ratio(tn_k, tn_k + fp[k]);
        if let (Some(r), Some(p)) = (recall, precision) {
            pr_points.push(CurvePoint {
                threshold: t,
                x: r,
                y: p,
            });
        }
        if let (Some(r), Some(s)) = (recall, specificity) {
            roc_points.push(CurvePoint {
                threshold: t,
                x: 1.0 - s,
                y: r,
            });
        }
    }

    let op_metrics = metrics_from_cm(&ConfusionMatrix {
        classes: vec![op],
    });
    let m = &op_metrics.classes[0];
    let pr_op = match (m.recall, m.precision) {
        (Some(r), Some(p)) => Some((r, p)),
        _ => None,
    };
    let roc_op = match (m.specificity, m.recall) {
        (Some(s), Some(r)) => Some((1.0 - s, r)),
        _ => None,
    };
    Ok((
        CurveSeries {
            class,
            kind: CurveKind::PrecisionRecall,
            points: pr_points,
            operating_point: pr_op,
        },
        CurveSeries {
            class,
            kind: CurveKind::Roc,
            points: roc_points,
            operating_point: roc_op,
        },
    ))
}
