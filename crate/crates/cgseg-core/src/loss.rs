//! Training objectives: Jaccard, Dice, cross entropy, weighted cross
//! entropy, focal Tversky, and weighted Jaccard, all differentiable scalar
//! functions of (probabilities, one-hot labels).
//!
//! Aggregation rule: element-wise products are summed over all pixels per
//! class, the smoothing constant is added to numerator and denominator, and
//! the per-class scores are averaged (or weight-combined). This keeps the
//! loss scale independent of the grid size.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::LabelGrid;
use crate::error::{invalid, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::GridTensor;

/// Target sum of a normalized weight vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNorm {
    /// Weights average to 1 (sum equals the class count).
    MeanOne,
    /// Weights form a convex combination (sum equals 1).
    Convex,
}

/// Per-class weights plus the normalization they are meant to carry.
///
/// The stored values are used as given; `normalized`/`convex` derive the
/// rescaled forms where a caller needs them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    values: Vec<f64>,
    norm: WeightNorm,
}

impl ClassWeights {
    pub fn new(values: Vec<f64>, norm: WeightNorm) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("class weights must not be empty"));
        }
        for &v in &values {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("class weight {v} is not a finite value >= 0")));
            }
        }
        if values.iter().sum::<f64>() == 0.0 {
            return Err(invalid("class weights must not all be zero"));
        }
        Ok(ClassWeights { values, norm })
    }

    pub fn uniform(class_count: usize) -> Self {
        ClassWeights {
            values: vec![1.0; class_count],
            norm: WeightNorm::MeanOne,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> WeightNorm {
        self.norm
    }

    /// The weights rescaled per their normalization mode.
    pub fn normalized(&self) -> Vec<f64> {
        let sum: f64 = self.values.iter().sum();
        let scale = match self.norm {
            WeightNorm::MeanOne => self.values.len() as f64 / sum,
            WeightNorm::Convex => 1.0 / sum,
        };
        self.values.iter().map(|&v| v * scale).collect()
    }

    /// The weights rescaled to sum to 1 regardless of mode.
    pub fn convex(&self) -> Vec<f64> {
        let sum: f64 = self.values.iter().sum();
        self.values.iter().map(|&v| v / sum).collect()
    }
}

/// The false-positive/false-negative trade-off and focusing exponent of the
/// focal Tversky loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TverskyParams {
    pub beta: f64,
    pub gamma: f64,
}

impl TverskyParams {
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(invalid(format!("tversky beta {beta} must lie in (0, 1)")));
        }
        if !(gamma > 0.0) {
            return Err(invalid(format!("tversky gamma {gamma} must be > 0")));
        }
        Ok(TverskyParams { beta, gamma })
    }
}

impl Default for TverskyParams {
    fn default() -> Self {
        TverskyParams {
            beta: 0.7,
            gamma: 4.0 / 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Jaccard,
    Dice,
    CrossEntropy,
    WeightedCrossEntropy,
    FocalTversky,
    WeightedJaccard,
}

/// Pixel reduction of the weighted cross entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeReduction {
    /// Divide the weighted sum by the total pixel weight.
    WeightedMean,
    /// Plain weighted sum, no normalization.
    Sum,
}

/// Selects and parameterizes one training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub variant: LossVariant,
    pub weights: Option<ClassWeights>,
    pub tversky: Option<TverskyParams>,
    /// Smoothing added to numerator and denominator of the overlap scores.
    pub smoothing: f64,
    pub ce_reduction: CeReduction,
}

const CE_CLAMP_LO: f64 = 1e-12;
/// Smoothing for the ratio-style losses.
pub const DEFAULT_RATIO_SMOOTHING: f64 = 1e-7;
/// The Dice loss carries the paper's +1 smoothing constant.
pub const DICE_SMOOTHING: f64 = 1.0;

impl LossSpec {
    pub fn jaccard() -> Self {
        LossSpec {
            variant: LossVariant::Jaccard,
            weights: None,
            tversky: None,
            smoothing: DEFAULT_RATIO_SMOOTHING,
            ce_reduction: CeReduction::WeightedMean,
        }
    }

    pub fn dice() -> Self {
        LossSpec {
            smoothing: DICE_SMOOTHING,
            variant: LossVariant::Dice,
            ..LossSpec::jaccard()
        }
    }

    pub fn cross_entropy() -> Self {
        LossSpec {
            variant: LossVariant::CrossEntropy,
            smoothing: 0.0,
            ..LossSpec::jaccard()
        }
    }

    pub fn weighted_cross_entropy(weights: ClassWeights) -> Self {
        LossSpec {
            variant: LossVariant::WeightedCrossEntropy,
            weights: Some(weights),
            smoothing: 0.0,
            ..LossSpec::jaccard()
        }
    }

    pub fn focal_tversky(params: TverskyParams) -> Self {
        LossSpec {
            variant: LossVariant::FocalTversky,
            tversky: Some(params),
            ..LossSpec::jaccard()
        }
    }

    pub fn weighted_jaccard(weights: ClassWeights) -> Self {
        LossSpec {
            variant: LossVariant::WeightedJaccard,
            weights: Some(weights),
            ..LossSpec::jaccard()
        }
    }

    pub fn with_smoothing(mut self, smoothing: f64) -> Self {
        self.smoothing = smoothing;
        self
    }

    pub fn with_ce_reduction(mut self, reduction: CeReduction) -> Self {
        self.ce_reduction = reduction;
        self
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.smoothing < 0.0 {
            return Err(invalid("loss smoothing must be >= 0"));
        }
        let weighted = matches!(
            self.variant,
            LossVariant::WeightedCrossEntropy | LossVariant::WeightedJaccard
        );
        match (&self.weights, weighted) {
            (None, true) => {
                return Err(invalid(format!(
                    "{:?} requires class weights",
                    self.variant
                )))
            }
            (Some(w), true) => {
                if w.len() != class_count {
                    return Err(invalid(format!(
                        "loss weights have {} entries for {class_count} classes",
                        w.len()
                    )));
                }
            }
            (Some(_), false) => {
                return Err(invalid(format!(
                    "{:?} does not take class weights",
                    self.variant
                )))
            }
            (None, false) => {}
        }
        match (&self.tversky, self.variant == LossVariant::FocalTversky) {
            (None, true) => return Err(invalid("focal_tversky requires beta/gamma parameters")),
            (Some(_), false) => {
                return Err(invalid(format!(
                    "{:?} does not take Tversky parameters",
                    self.variant
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

/// One-hot encoded ground truth, C×H×W or N×C×H×W with exactly one 1 per
/// pixel column.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotLabels {
    tensor: GridTensor,
}

impl OneHotLabels {
    pub fn new(tensor: GridTensor) -> Result<Self> {
        let (n, c, h, w) = nchw(&tensor, "one-hot labels")?;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let mut ones = 0;
                    for ci in 0..c {
                        let v = tensor.data()[((ni * c + ci) * h + hi) * w + wi];
                        if v == 1.0 {
                            ones += 1;
                        } else if v != 0.0 {
                            return Err(invalid(format!(
                                "one-hot labels may only hold 0 or 1, found {v}"
                            )));
                        }
                    }
                    if ones != 1 {
                        return Err(invalid(format!(
                            "pixel ({hi}, {wi}) of sample {ni} has {ones} ones in its one-hot column"
                        )));
                    }
                }
            }
        }
        Ok(OneHotLabels { tensor })
    }

    /// Exact one-hot encoding of a label grid; errors carry the offending
    /// pixel coordinate.
    pub fn from_labels(labels: &LabelGrid, class_count: usize) -> Result<Self> {
        labels.check_classes(class_count)?;
        let (h, w) = (labels.height(), labels.width());
        let mut data = vec![0.0; class_count * h * w];
        for r in 0..h {
            for c in 0..w {
                let class = labels.get(r, c) as usize;
                data[(class * h + r) * w + c] = 1.0;
            }
        }
        Ok(OneHotLabels {
            tensor: GridTensor::from_parts(vec![class_count, h, w], data),
        })
    }

    /// Stacks per-sample encodings into an N×C×H×W batch.
    pub fn stack_batch(labels: &[&LabelGrid], class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(invalid("one-hot stack: empty batch"));
        }
        let (h, w) = (labels[0].height(), labels[0].width());
        let mut data = Vec::with_capacity(labels.len() * class_count * h * w);
        for grid in labels {
            if grid.height() != h || grid.width() != w {
                return Err(invalid("one-hot stack: label grids disagree in shape"));
            }
            let one = OneHotLabels::from_labels(grid, class_count)?;
            data.extend_from_slice(one.tensor.data());
        }
        Ok(OneHotLabels {
            tensor: GridTensor::from_parts(vec![labels.len(), class_count, h, w], data),
        })
    }

    pub fn tensor(&self) -> &GridTensor {
        &self.tensor
    }

    /// Pixel count per class.
    pub fn class_counts(&self) -> Vec<f64> {
        let (n, c, h, w) = nchw(&self.tensor, "one-hot labels").expect("validated");
        let mut counts = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        counts[ci] += self.tensor.data()[((ni * c + ci) * h + hi) * w + wi];
                    }
                }
            }
        }
        counts
    }
}

fn nchw(t: &GridTensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((1, c, h, w)),
        &[n, c, h, w] => Ok((n, c, h, w)),
        other => Err(invalid(format!(
            "{what}: expected C×H×W or N×C×H×W, got shape {other:?}"
        ))),
    }
}

/// Builds the loss graph on `tape` above an existing probability node and
/// returns the scalar loss node.
pub fn loss_node(
    tape: &mut Tape,
    probs: NodeId,
    labels: &OneHotLabels,
    spec: &LossSpec,
) -> Result<NodeId> {
    let shape = tape.value(probs).shape().to_vec();
    if shape != labels.tensor().shape() {
        return Err(crate::error::shape_mismatch(
            "loss",
            &shape,
            labels.tensor().shape(),
        ));
    }
    let (_, c, _, _) = nchw(tape.value(probs), "loss probabilities")?;
    spec.validate(c)?;
    let eps = spec.smoothing;
    match spec.variant {
        LossVariant::Jaccard => {
            let uniform = vec![1.0 / c as f64; c];
            jaccard_core(tape, probs, labels, eps, &uniform)
        }
        LossVariant::WeightedJaccard => {
            let w = spec.weights.as_ref().expect("validated").convex();
            jaccard_core(tape, probs, labels, eps, &w)
        }
        LossVariant::Dice => {
            let (i_node, s_node, sum_y) = overlap_sums(tape, probs, labels)?;
            let num = tape.affine(i_node, 2.0, eps)?;
            let den_inner = {
                let ty = tape.constant(GridTensor::new(vec![c], sum_y)?)?;
                tape.add(s_node, ty)?
            };
            let den = tape.affine(den_inner, 1.0, eps)?;
            let ratio = tape.div(num, den)?;
            let w = tape.constant(GridTensor::from_parts(vec![c], vec![1.0 / c as f64; c]))?;
            let mean = {
                let weighted = tape.mul(ratio, w)?;
                tape.sum_all(weighted)?
            };
            tape.affine(mean, -1.0, 1.0)
        }
        LossVariant::CrossEntropy => {
            let pixels = tape.value(probs).len() / c;
            let logp = tape.ln_clamped(probs, CE_CLAMP_LO, 1.0)?;
            let labels_node = tape.constant(labels.tensor().clone())?;
            let picked = tape.mul(logp, labels_node)?;
            let total = tape.sum_all(picked)?;
            tape.affine(total, -1.0 / pixels as f64, 0.0)
        }
        LossVariant::WeightedCrossEntropy => {
            let weights = spec.weights.as_ref().expect("validated").raw().to_vec();
            let logp = tape.ln_clamped(probs, CE_CLAMP_LO, 1.0)?;
            let mask = weighted_mask(labels, &weights);
            let mask_node = tape.constant(mask)?;
            let picked = tape.mul(logp, mask_node)?;
            let total = tape.sum_all(picked)?;
            match spec.ce_reduction {
                CeReduction::Sum => tape.affine(total, -1.0, 0.0),
                CeReduction::WeightedMean => {
                    let counts = labels.class_counts();
                    let denom: f64 = counts.iter().zip(&weights).map(|(&n, &w)| n * w).sum();
                    if denom <= 0.0 {
                        return Err(invalid(
                            "weighted cross entropy: total pixel weight is zero",
                        ));
                    }
                    tape.affine(total, -1.0 / denom, 0.0)
                }
            }
        }
        LossVariant::FocalTversky => {
            let params = spec.tversky.expect("validated");
            let (i_node, s_node, sum_y) = overlap_sums(tape, probs, labels)?;
            let ty = tape.constant(GridTensor::new(vec![c], sum_y)?)?;
            // TP + beta*FP + (1-beta)*FN with FP = S - I and FN = T - I.
            let fp = tape.sub(s_node, i_node)?;
            let fneg = tape.sub(ty, i_node)?;
            let bfp = tape.affine(fp, params.beta, 0.0)?;
            let bfn = tape.affine(fneg, 1.0 - params.beta, 0.0)?;
            let den_inner = {
                let a = tape.add(i_node, bfp)?;
                tape.add(a, bfn)?
            };
            let num = tape.affine(i_node, 1.0, eps)?;
            let den = tape.affine(den_inner, 1.0, eps)?;
            let ti = tape.div(num, den)?;
            // relu guards against 1 - TI dipping below zero by rounding,
            // which would make the fractional power undefined.
            let base = {
                let one_minus = tape.affine(ti, -1.0, 1.0)?;
                tape.relu(one_minus)?
            };
            let powed = tape.pow_const(base, params.gamma)?;
            let w = tape.constant(GridTensor::from_parts(vec![c], vec![1.0 / c as f64; c]))?;
            let weighted = tape.mul(powed, w)?;
            tape.sum_all(weighted)
        }
    }
}

/// Loss value for plain tensors, through a throwaway tape.
pub fn loss_value(probs: &GridTensor, labels: &OneHotLabels, spec: &LossSpec) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone())?;
    let node = loss_node(&mut tape, p, labels, spec)?;
    Ok(tape.value(node).item())
}

/// I_c = sum(y*yhat), S_c = sum(yhat) as tape nodes, plus the constant
/// per-class truth counts.
fn overlap_sums(
    tape: &mut Tape,
    probs: NodeId,
    labels: &OneHotLabels,
) -> Result<(NodeId, NodeId, Vec<f64>)> {
    let labels_node = tape.constant(labels.tensor().clone())?;
    let prod = tape.mul(probs, labels_node)?;
    let i_node = tape.sum_channelwise(prod)?;
    let s_node = tape.sum_channelwise(probs)?;
    Ok((i_node, s_node, labels.class_counts()))
}

/// 1 - sum_c w_c * (I_c + eps)/(U_c + eps) with U = S + T - I.
fn jaccard_core(
    tape: &mut Tape,
    probs: NodeId,
    labels: &OneHotLabels,
    eps: f64,
    class_weights: &[f64],
) -> Result<NodeId> {
    let c = class_weights.len();
    let (i_node, s_node, sum_y) = overlap_sums(tape, probs, labels)?;
    let ty = tape.constant(GridTensor::new(vec![c], sum_y)?)?;
    let union = {
        let st = tape.add(s_node, ty)?;
        tape.sub(st, i_node)?
    };
    let num = tape.affine(i_node, 1.0, eps)?;
    let den = tape.affine(union, 1.0, eps)?;
    let ratio = tape.div(num, den)?;
    let w = tape.constant(GridTensor::new(vec![c], class_weights.to_vec())?)?;
    let weighted = tape.mul(ratio, w)?;
    let total = tape.sum_all(weighted)?;
    tape.affine(total, -1.0, 1.0)
}

/// Constant mask that weighs each pixel's true class: m = w_class * y.
fn weighted_mask(labels: &OneHotLabels, weights: &[f64]) -> GridTensor {
    let t = labels.tensor();
    let (n, c, h, w) = nchw(t, "one-hot labels").expect("validated");
    let mut data = vec![0.0; t.len()];
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let i = ((ni * c + ci) * h + hi) * w + wi;
                    data[i] = t.data()[i] * weights[ci];
                }
            }
        }
    }
    GridTensor::from_parts(t.shape().to_vec(), data)
}
