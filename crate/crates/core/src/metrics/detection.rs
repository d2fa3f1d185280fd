use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, iou_3d, Box3D, ObjectClass};
use crate::numeric::exact_sum;

/// Center-distance thresholds (meters) averaged in distance mode.
pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const AP_SAMPLES: usize = 101;

/// Overlap thresholds per class for IoU matching.
pub fn default_iou_thresholds() -> BTreeMap<ObjectClass, f64> {
    use ObjectClass::*;
    BTreeMap::from([
        (Car, 0.7),
        (Pedestrian, 0.1),
        (Bicycle, 0.3),
        (Truck, 0.7),
        (ConstructionVehicle, 0.7),
        (Bus, 0.7),
        (Trailer, 0.7),
        (Barrier, 0.5),
        (Motorcycle, 0.5),
        (TrafficCone, 0.5),
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouKind {
    Bev,
    #[default]
    ThreeD,
}

/// When a prediction may claim a ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Criterion {
    /// BEV center distance at most the threshold; closer is better.
    CenterDistance(f64),
    /// Overlap at least the threshold; larger is better.
    Iou { kind: IouKind, threshold: f64 },
}

impl Criterion {
    /// Match quality (larger is better) if `pred` may claim `gt`.
    pub fn affinity(&self, pred: &Box3D, gt: &Box3D) -> Result<Option<f64>> {
        Ok(match *self {
            Criterion::CenterDistance(t) => {
                let d = (pred.center.xy() - gt.center.xy()).norm();
                (d <= t).then_some(-d)
            }
            Criterion::Iou { kind, threshold } => {
                let iou = match kind {
                    IouKind::Bev => bev_iou(pred, gt)?,
                    IouKind::ThreeD => iou_3d(pred, gt)?,
                };
                (iou >= threshold).then_some(iou)
            }
        })
    }
}

/// Score of a prediction; boxes without a score rank as 1.
pub fn score_of(b: &Box3D) -> f64 {
    b.score.unwrap_or(1.0)
}

/// Indices of `preds` by descending score, ties kept in input order.
pub fn score_order(preds: &[Box3D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| score_of(&preds[b]).total_cmp(&score_of(&preds[a])));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Scores in descending order.
    pub scores: Vec<f64>,
    /// Whether the prediction at the same position is a true positive.
    pub tp: Vec<bool>,
    /// Ground-truth index claimed by each prediction, in score order.
    pub matched: Vec<Option<usize>>,
    pub n_gt: usize,
}

/// Greedy assignment: predictions in descending score each take the best
/// still-free ground truth that satisfies `criterion` (lowest index on ties).
pub fn match_detections(preds: &[Box3D], gts: &[Box3D], criterion: Criterion) -> Result<MatchResult> {
    let order = score_order(preds);
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult {
        scores: Vec::with_capacity(preds.len()),
        tp: Vec::with_capacity(preds.len()),
        matched: Vec::with_capacity(preds.len()),
        n_gt: gts.len(),
    };
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            if let Some(a) = criterion.affinity(&preds[i], gt)? {
                if best.is_none_or(|(_, b)| a > b) {
                    best = Some((j, a));
                }
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        out.scores.push(score_of(&preds[i]));
        out.tp.push(best.is_some());
        out.matched.push(best.map(|b| b.0));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ApOptions {
    /// Drop recall below 0.1 and subtract a 0.1 precision floor before
    /// averaging, then rescale.
    pub trim: bool,
}

/// 101-point interpolated average precision of score-ordered flags.
pub fn average_precision(tp: &[bool], n_gt: usize, options: ApOptions) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::invalid("average precision needs at least one ground-truth box"));
    }
    let mut curve: Vec<(usize, f64)> = Vec::with_capacity(tp.len());
    let (mut ntp, mut nfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ntp += 1;
        } else {
            nfp += 1;
        }
        curve.push((ntp, ntp as f64 / (ntp + nfp) as f64));
    }
    // Envelope from the right: best precision at recall >= each point.
    let mut best = vec![0.0f64; curve.len() + 1];
    for i in (0..curve.len()).rev() {
        best[i] = best[i + 1].max(curve[i].1);
    }
    let mut samples = Vec::with_capacity(AP_SAMPLES);
    let mut cursor = 0;
    for r in 0..AP_SAMPLES {
        // First curve point with recall >= r / 100, compared exactly.
        while cursor < curve.len() && curve[cursor].0 * (AP_SAMPLES - 1) < r * n_gt {
            cursor += 1;
        }
        samples.push(best[cursor]);
    }
    if !options.trim {
        return Ok(exact_sum(samples) / AP_SAMPLES as f64);
    }
    let (min_recall, min_precision) = (10, 0.1);
    let kept: Vec<f64> = samples[min_recall + 1..]
        .iter()
        .map(|p| (p - min_precision).max(0.0))
        .collect();
    Ok(exact_sum(kept.iter().copied()) / kept.len() as f64 / (1.0 - min_precision))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    #[default]
    BevDistance,
    Iou,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::BevDistance => "bev-distance",
            EvalMode::Iou => "iou",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub distance_thresholds: Vec<f64>,
    pub iou_kind: IouKind,
    pub iou_thresholds: BTreeMap<ObjectClass, f64>,
    pub ap: ApOptions,
    /// Classes to report; `None` means every class with ground truth.
    pub classes: Option<Vec<ObjectClass>>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            distance_thresholds: DISTANCE_THRESHOLDS.to_vec(),
            iou_kind: IouKind::ThreeD,
            iou_thresholds: default_iou_thresholds(),
            ap: ApOptions::default(),
            classes: None,
        }
    }
}

/// Predictions and ground truth of one frame.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DetectionFrame {
    pub preds: Vec<Box3D>,
    pub gts: Vec<Box3D>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: ObjectClass,
    /// `(threshold, AP)` for every threshold evaluated.
    pub per_threshold: Vec<(f64, f64)>,
    /// Mean over thresholds.
    pub ap: f64,
    pub n_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub mode: EvalMode,
    pub classes: Vec<ClassAp>,
    pub map: f64,
}

/// Concatenates per-frame matches of one class into one ranked list.
fn pooled_flags(frames: &[DetectionFrame], class: ObjectClass, criterion: Criterion) -> Result<(Vec<bool>, usize)> {
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0;
    for f in frames {
        let preds: Vec<Box3D> = f.preds.iter().filter(|b| b.class == class).cloned().collect();
        let gts: Vec<Box3D> = f.gts.iter().filter(|b| b.class == class).cloned().collect();
        let m = match_detections(&preds, &gts, criterion)?;
        n_gt += m.n_gt;
        ranked.extend(m.scores.into_iter().zip(m.tp));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok((ranked.into_iter().map(|r| r.1).collect(), n_gt))
}

/// Per-class AP and mAP over the classes that have ground truth.
pub fn evaluate_detections(frames: &[DetectionFrame], mode: EvalMode, config: &DetectionConfig) -> Result<DetectionReport> {
    let present: Vec<ObjectClass> = match &config.classes {
        Some(c) => c.clone(),
        None => ObjectClass::ALL
            .into_iter()
            .filter(|c| frames.iter().any(|f| f.gts.iter().any(|b| b.class == *c)))
            .collect(),
    };
    let mut classes = Vec::new();
    for class in present {
        let criteria: Vec<(f64, Criterion)> = match mode {
            EvalMode::BevDistance => config
                .distance_thresholds
                .iter()
                .map(|&t| (t, Criterion::CenterDistance(t)))
                .collect(),
            EvalMode::Iou => {
                let t = *config
                    .iou_thresholds
                    .get(&class)
                    .ok_or_else(|| Error::UnknownClass(class.name().to_string()))?;
                vec![(
                    t,
                    Criterion::Iou {
                        kind: config.iou_kind,
                        threshold: t,
                    },
                )]
            }
        };
        if criteria.is_empty() {
            return Err(Error::invalid("no matching thresholds configured"));
        }
        let mut per_threshold = Vec::new();
        let mut n_gt = 0;
        for (t, c) in criteria {
            let (flags, n) = pooled_flags(frames, class, c)?;
            n_gt = n;
            if n == 0 {
                break;
            }
            per_threshold.push((t, average_precision(&flags, n, config.ap)?));
        }
        if n_gt == 0 {
            continue;
        }
        let ap = exact_sum(per_threshold.iter().map(|p| p.1)) / per_threshold.len() as f64;
        classes.push(ClassAp {
            class,
            per_threshold,
            ap,
            n_gt,
        });
    }
    let map = if classes.is_empty() {
        0.0
    } else {
        exact_sum(classes.iter().map(|c| c.ap)) / classes.len() as f64
    };
    Ok(DetectionReport { mode, classes, map })
}

pub const CSV_HEADER: &str = "class,mode,threshold,AP";

impl DetectionReport {
    /// Rows for every (class, threshold), then a `mean` row per class when
    /// several thresholds were averaged, then the overall mAP row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        let mode = self.mode.name();
        for c in &self.classes {
            for (t, ap) in &c.per_threshold {
                let _ = writeln!(s, "{},{mode},{t},{ap}", c.class);
            }
            if c.per_threshold.len() > 1 {
                let _ = writeln!(s, "{},{mode},mean,{}", c.class, c.ap);
            }
        }
        let _ = writeln!(s, "all,{mode},mean,{}", self.map);
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("detection AP ({})\n", self.mode.name());
        for c in &self.classes {
            let _ = writeln!(s, "  {:<22} AP {:>7.4}  (n_gt {})", c.class.name(), c.ap, c.n_gt);
        }
        let _ = writeln!(s, "  {:<22} {:>10.4}", "mAP", self.map);
        s
    }
}

pub const DETECTIONS_FORMAT: &str = "flowbev-detections";
pub const DETECTIONS_VERSION: u64 = 1;

/// Boxes of one frame, keyed by a frame name shared between prediction and
/// ground-truth files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedBoxes {
    pub name: String,
    pub boxes: Vec<Box3D>,
}

#[derive(Serialize, Deserialize)]
struct DetectionsFile {
    format: String,
    version: u64,
    config: serde_json::Value,
    frames: Vec<NamedBoxes>,
}

pub fn write_detections(frames: &[NamedBoxes], config: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    container::write(
        path.as_ref(),
        &DetectionsFile {
            format: DETECTIONS_FORMAT.into(),
            version: DETECTIONS_VERSION,
            config,
            frames: frames.to_vec(),
        },
    )
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<NamedBoxes>> {
    let (f, _): (DetectionsFile, _) = container::read(path.as_ref(), DETECTIONS_FORMAT, DETECTIONS_VERSION)?;
    for (i, frame) in f.frames.iter().enumerate() {
        for (j, b) in frame.boxes.iter().enumerate() {
            b.validate()
                .map_err(|e| container::schema_error(format!("frames[{i}].boxes[{j}]"), e))?;
        }
    }
    Ok(f.frames)
}

/// Pairs prediction and ground-truth frames by name; frames missing from the
/// predictions count as empty.
pub fn pair_frames(preds: &[NamedBoxes], gts: &[NamedBoxes]) -> Result<Vec<DetectionFrame>> {
    let by_name: BTreeMap<&str, &NamedBoxes> = preds.iter().map(|f| (f.name.as_str(), f)).collect();
    if let Some(extra) = preds.iter().find(|p| !gts.iter().any(|g| g.name == p.name)) {
        return Err(Error::invalid(format!("prediction frame `{}` has no ground truth", extra.name)));
    }
    Ok(gts
        .iter()
        .map(|g| DetectionFrame {
            preds: by_name.get(g.name.as_str()).map(|p| p.boxes.clone()).unwrap_or_default(),
            gts: g.boxes.clone(),
        })
        .collect())
}
