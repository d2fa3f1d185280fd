//! Training objectives evaluated on fixed predictions: per-group object
//! losses, point classification, and flow offset/consistency terms.

use serde::Serialize;

use crate::alignment::ClassLabel;
use crate::error::{check_len, Error, Result};
use crate::geometry::{rotation_frobenius_distance, RigidTransform, SevenVector, Vec3};

pub const SMOOTH_L1_BETA: f64 = 1.0;
pub const PROB_FLOOR: f64 = 1e-12;
const PROB_SUM_TOL: f64 = 1e-6;

/// Probabilities for (background, static, dynamic).
pub type ClassScores = [f64; 3];

pub fn validate_scores(scores: &[ClassScores]) -> Result<()> {
    for (i, s) in scores.iter().enumerate() {
        if s.iter().any(|p| !(0.0..=1.0).contains(p)) || (s.iter().sum::<f64>() - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!("scores[{i}] = {s:?} is not a probability triple")));
        }
    }
    Ok(())
}

/// One-hot scores for `labels`.
pub fn hard_scores(labels: &[ClassLabel]) -> Vec<ClassScores> {
    labels
        .iter()
        .map(|l| {
            let mut s = [0.0; 3];
            s[l.index()] = 1.0;
            s
        })
        .collect()
}

/// Sum over components of the Huber-style penalty with kink at `beta`.
pub fn smooth_l1(x: &[f64], beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    x.iter()
        .map(|v| {
            let a = v.abs();
            if a < beta {
                0.5 * a * a / beta
            } else {
                a - 0.5 * beta
            }
        })
        .sum()
}

fn smooth_l1_3(v: &Vec3, beta: f64) -> f64 {
    smooth_l1(v.as_slice(), beta)
}

/// Mean of a possibly empty set; `empty` marks a zero denominator, in which
/// case `value` is 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Averaged {
    pub value: f64,
    pub empty: bool,
}

impl Averaged {
    fn of(sum: f64, n: usize) -> Self {
        if n == 0 {
            Self { value: 0.0, empty: true }
        } else {
            Self {
                value: sum / n as f64,
                empty: false,
            }
        }
    }
}

/// Translation, rotation and reconstruction error of one group's predicted
/// transform.
pub fn object_loss_local(pred: &SevenVector, gt: &SevenVector, points: &[Vec3], beta: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyInput("local group"));
    }
    let dt = Vec3::from(pred.t) - Vec3::from(gt.t);
    let rot = rotation_frobenius_distance(&pred.quaternion(), &gt.quaternion())?;
    let (tp, tg) = (pred.to_transform()?, gt.to_transform()?);
    let recon: f64 = points.iter().map(|p| smooth_l1_3(&(tp.apply(p) - tg.apply(p)), beta)).sum();
    Ok(smooth_l1_3(&dt, beta) + rot + recon / points.len() as f64)
}

/// Mean over all local groups.
pub fn object_loss_total(local_losses: &[f64]) -> Averaged {
    Averaged::of(local_losses.iter().sum(), local_losses.len())
}

fn lovasz_gradient(sorted_fg: &[bool]) -> Vec<f64> {
    let gts = sorted_fg.iter().filter(|&&f| f).count() as f64;
    let mut grad = Vec::with_capacity(sorted_fg.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in sorted_fg {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

/// Lovász extension of the Jaccard loss, averaged over the classes present in
/// `labels`.
pub fn lovasz_softmax(scores: &[ClassScores], labels: &[ClassLabel]) -> Result<f64> {
    check_len("labels", scores.len(), labels.len())?;
    if scores.is_empty() {
        return Err(Error::EmptyInput("lovasz batch"));
    }
    let mut total = 0.0;
    let mut present = 0;
    for c in ClassLabel::ALL {
        let fg: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if !fg.contains(&true) {
            continue;
        }
        present += 1;
        let mut errs: Vec<(f64, bool)> = scores
            .iter()
            .zip(&fg)
            .map(|(s, &f)| ((if f { 1.0 } else { 0.0 } - s[c.index()]).abs(), f))
            .collect();
        errs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let sorted_fg: Vec<bool> = errs.iter().map(|e| e.1).collect();
        total += errs
            .iter()
            .zip(lovasz_gradient(&sorted_fg))
            .map(|(e, g)| e.0 * g)
            .sum::<f64>();
    }
    Ok(total / present as f64)
}

/// Inverse class frequency of `labels`, normalized to mean 1 over the
/// classes that occur. Absent classes get weight 1.
pub fn inverse_frequency_weights(labels: &[ClassLabel]) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for l in labels {
        counts[l.index()] += 1;
    }
    let inv: Vec<(usize, f64)> = (0..3)
        .filter(|&c| counts[c] > 0)
        .map(|c| (c, labels.len() as f64 / counts[c] as f64))
        .collect();
    let mut w = [1.0; 3];
    if inv.is_empty() {
        return w;
    }
    let mean = inv.iter().map(|x| x.1).sum::<f64>() / inv.len() as f64;
    for (c, v) in inv {
        w[c] = v / mean;
    }
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassificationLoss {
    pub cross_entropy: f64,
    pub lovasz: f64,
    pub total: f64,
}

/// Weighted categorical cross entropy (mean over points, probabilities
/// floored at [`PROB_FLOOR`]) plus Lovász-Softmax. `None` weights use
/// [`inverse_frequency_weights`].
pub fn classification_loss(
    scores: &[ClassScores],
    labels: &[ClassLabel],
    class_weights: Option<[f64; 3]>,
) -> Result<ClassificationLoss> {
    check_len("labels", scores.len(), labels.len())?;
    validate_scores(scores)?;
    let w = class_weights.unwrap_or_else(|| inverse_frequency_weights(labels));
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid("class weights must be positive"));
    }
    let lovasz = lovasz_softmax(scores, labels)?;
    let ce = scores
        .iter()
        .zip(labels)
        .map(|(s, l)| -w[l.index()] * s[l.index()].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / scores.len() as f64;
    let ce = if ce == 0.0 { 0.0 } else { ce };
    Ok(ClassificationLoss {
        cross_entropy: ce,
        lovasz,
        total: ce + lovasz,
    })
}

fn flow_residual_loss(points: &[Vec3], flows: &[Vec3], targets: &[RigidTransform], beta: f64) -> Result<Averaged> {
    check_len("flows", points.len(), flows.len())?;
    check_len("transforms", points.len(), targets.len())?;
    let sum = points
        .iter()
        .zip(flows)
        .zip(targets)
        .map(|((p, o), t)| smooth_l1_3(&(p + o - t.apply(p)), beta))
        .sum();
    Ok(Averaged::of(sum, points.len()))
}

/// Mean smooth-L1 gap between flow-moved dynamic points and their images
/// under the ground-truth group transforms.
pub fn offset_loss(points: &[Vec3], flows: &[Vec3], gt_transforms: &[RigidTransform], beta: f64) -> Result<Averaged> {
    flow_residual_loss(points, flows, gt_transforms, beta)
}

/// As [`offset_loss`], against the predicted group transforms.
pub fn consistency_loss(
    points: &[Vec3],
    flows: &[Vec3],
    pred_transforms: &[RigidTransform],
    beta: f64,
) -> Result<Averaged> {
    flow_residual_loss(points, flows, pred_transforms, beta)
}

/// One local group's predicted and reference transform with its points.
#[derive(Clone, Debug)]
pub struct GroupTarget<'a> {
    pub pred: SevenVector,
    pub gt: SevenVector,
    pub points: &'a [Vec3],
}

/// Everything the combined objective consumes.
#[derive(Clone, Debug)]
pub struct LossInputs<'a> {
    pub scores: &'a [ClassScores],
    pub labels: &'a [ClassLabel],
    pub class_weights: Option<[f64; 3]>,
    pub groups: &'a [GroupTarget<'a>],
    /// Dynamic points with their predicted flows and the predicted and
    /// reference transforms of their groups.
    pub dynamic_points: &'a [Vec3],
    pub pred_flows: &'a [Vec3],
    pub gt_transforms: &'a [RigidTransform],
    pub pred_transforms: &'a [RigidTransform],
    pub beta: f64,
    /// Detection-head term, supplied externally.
    pub l_rpn: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_objects: f64,
    pub l_cls: f64,
    pub l_cls_cross_entropy: f64,
    pub l_cls_lovasz: f64,
    pub l_offset: f64,
    pub l_consistent: f64,
    pub l_points: f64,
    pub l_rpn: f64,
    pub l_total: f64,
    pub no_groups: bool,
    pub no_dynamic_points: bool,
}

pub fn total_loss(inputs: &LossInputs<'_>) -> Result<LossBreakdown> {
    if !(inputs.beta.is_finite() && inputs.beta > 0.0) {
        return Err(Error::invalid("beta must be positive"));
    }
    let local = inputs
        .groups
        .iter()
        .map(|g| object_loss_local(&g.pred, &g.gt, g.points, inputs.beta))
        .collect::<Result<Vec<_>>>()?;
    let objects = object_loss_total(&local);
    let cls = classification_loss(inputs.scores, inputs.labels, inputs.class_weights)?;
    let offset = offset_loss(inputs.dynamic_points, inputs.pred_flows, inputs.gt_transforms, inputs.beta)?;
    let consistent = consistency_loss(inputs.dynamic_points, inputs.pred_flows, inputs.pred_transforms, inputs.beta)?;
    let l_points = cls.total + offset.value + consistent.value;
    Ok(LossBreakdown {
        l_objects: objects.value,
        l_cls: cls.total,
        l_cls_cross_entropy: cls.cross_entropy,
        l_cls_lovasz: cls.lovasz,
        l_offset: offset.value,
        l_consistent: consistent.value,
        l_points,
        l_rpn: inputs.l_rpn,
        l_total: objects.value + l_points + inputs.l_rpn,
        no_groups: objects.empty,
        no_dynamic_points: offset.empty,
    })
}
