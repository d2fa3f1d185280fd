//! Multi-sweep merging, point labelling and rectification of moving objects.

mod io;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::sim::{ObjectTrajectory, SequenceSample};

pub use io::{read_merged, read_merged_with_warnings, write_merged, MERGED_FORMAT, MERGED_VERSION};

/// Translation (meters, before scaling) above which an object is dynamic.
pub const DYNAMIC_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Background,
    StaticFg,
    DynamicFg,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Background, ClassLabel::StaticFg, ClassLabel::DynamicFg];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Identifies the points of one instance observed at one sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey {
    pub instance: u32,
    pub k: u32,
}

/// All sweeps of a sequence expressed in the world frame.
///
/// Per-point columns are parallel to `points`. Points are ordered by sweep
/// index `k` descending (oldest first), then by their index in the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedCloud {
    pub points: Vec<Vec3>,
    pub k: Vec<u32>,
    /// Position of the originating sweep in the sample.
    pub sweep_index: Vec<usize>,
    pub instance: Vec<Option<u32>>,
    pub labels: Option<Vec<ClassLabel>>,
    /// Ground-truth flow; zero except on dynamic points.
    pub flows: Option<Vec<Vec3>>,
    pub metric_scale: f64,
}

impl MergedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_k(&self) -> u32 {
        self.k.iter().copied().max().unwrap_or(0)
    }

    pub fn labels(&self) -> Result<&[ClassLabel]> {
        self.labels.as_deref().ok_or(Error::MissingLabels)
    }

    /// Indices of points carrying `label`.
    pub fn indices_with(&self, label: ClassLabel) -> Result<Vec<usize>> {
        Ok(self
            .labels()?
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == label).then_some(i))
            .collect())
    }

    pub fn label_counts(&self) -> Result<[usize; 3]> {
        let mut counts = [0; 3];
        for l in self.labels()? {
            counts[l.index()] += 1;
        }
        Ok(counts)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        check_len("k", n, self.k.len())?;
        check_len("sweep_index", n, self.sweep_index.len())?;
        check_len("instance", n, self.instance.len())?;
        if let Some(labels) = &self.labels {
            check_len("labels", n, labels.len())?;
        }
        if let Some(flows) = &self.flows {
            check_len("flows", n, flows.len())?;
            let labels = self.labels()?;
            if let Some(i) = (0..n).find(|&i| labels[i] != ClassLabel::DynamicFg && flows[i] != Vec3::zeros()) {
                return Err(Error::invalid(format!("point {i} is not dynamic but carries a nonzero flow")));
            }
        }
        if !(self.metric_scale.is_finite() && self.metric_scale > 0.0) {
            return Err(Error::invalid("metric_scale must be positive"));
        }
        Ok(())
    }

    /// Runs labelling and ground-truth flow computation in place.
    pub fn annotate(&mut self, trajectories: &[ObjectTrajectory], dyn_threshold: f64) -> Result<()> {
        self.labels = Some(label_points(self, trajectories, dyn_threshold)?);
        self.flows = Some(gt_scene_flow(self, trajectories)?);
        Ok(())
    }
}

/// Maps every sweep into the world frame through its ego pose.
pub fn emc_merge(sample: &SequenceSample) -> Result<MergedCloud> {
    if sample.sweeps.is_empty() {
        return Err(Error::EmptyInput("sequence has no sweeps"));
    }
    let mut order: Vec<usize> = (0..sample.sweeps.len()).collect();
    order.sort_by_key(|&s| std::cmp::Reverse(sample.sweeps[s].k));

    let blocks: Vec<Vec<Vec3>> = order
        .par_iter()
        .map(|&s| {
            let sweep = &sample.sweeps[s];
            sweep.points.iter().map(|p| sweep.ego_pose.apply(p)).collect()
        })
        .collect();

    let n = sample.num_points();
    let mut merged = MergedCloud {
        points: Vec::with_capacity(n),
        k: Vec::with_capacity(n),
        sweep_index: Vec::with_capacity(n),
        instance: Vec::with_capacity(n),
        labels: None,
        flows: None,
        metric_scale: sample.metric_scale,
    };
    for (&s, block) in order.iter().zip(blocks) {
        let sweep = &sample.sweeps[s];
        check_len("source_ids", sweep.points.len(), sweep.source_ids.len())?;
        merged.k.extend(std::iter::repeat_n(sweep.k, block.len()));
        merged.sweep_index.extend(std::iter::repeat_n(s, block.len()));
        merged.points.extend(block);
        merged.instance.extend_from_slice(&sweep.source_ids);
    }
    Ok(merged)
}

fn trajectory_index(trajectories: &[ObjectTrajectory]) -> HashMap<u32, &ObjectTrajectory> {
    trajectories.iter().map(|t| (t.object_id, t)).collect()
}

/// Center translation of `traj` between its oldest sweep covered by a cloud
/// spanning `max_k` sweeps and the keyframe.
pub fn window_translation(traj: &ObjectTrajectory, max_k: usize) -> f64 {
    let oldest = max_k.min(traj.max_k());
    (traj.poses[traj.max_k() - oldest].translation() - traj.keyframe_pose().translation()).norm()
}

/// Background, static or dynamic label per point. The threshold is scaled by
/// the cloud's `metric_scale` and compared strictly.
pub fn label_points(
    merged: &MergedCloud,
    trajectories: &[ObjectTrajectory],
    dyn_threshold: f64,
) -> Result<Vec<ClassLabel>> {
    let by_id = trajectory_index(trajectories);
    let threshold = dyn_threshold * merged.metric_scale;
    let max_k = merged.max_k() as usize;
    let mut per_object: HashMap<u32, ClassLabel> = HashMap::new();
    merged
        .instance
        .iter()
        .enumerate()
        .map(|(index, inst)| {
            let Some(id) = *inst else {
                return Ok(ClassLabel::Background);
            };
            if let Some(&label) = per_object.get(&id) {
                return Ok(label);
            }
            let traj = by_id.get(&id).ok_or(Error::UnknownInstance { index, instance: id })?;
            let label = if window_translation(traj, max_k) > threshold {
                ClassLabel::DynamicFg
            } else {
                ClassLabel::StaticFg
            };
            per_object.insert(id, label);
            Ok(label)
        })
        .collect()
}

/// Rigid map carrying a point observed on the object at sweep `k` to where
/// the object holds it at the keyframe.
pub fn gt_rectification_transform(traj: &ObjectTrajectory, k: usize) -> Result<RigidTransform> {
    if k == 0 {
        traj.pose(0)?;
        return Ok(RigidTransform::identity());
    }
    Ok(traj.keyframe_pose().compose(&traj.pose(k)?.inverse()))
}

/// Ground-truth rectification transform of every (instance, k) group of
/// dynamic points.
pub fn gt_group_transforms(
    merged: &MergedCloud,
    trajectories: &[ObjectTrajectory],
) -> Result<HashMap<GroupKey, RigidTransform>> {
    let labels = merged.labels()?;
    let by_id = trajectory_index(trajectories);
    let mut out = HashMap::new();
    for i in 0..merged.len() {
        if labels[i] != ClassLabel::DynamicFg {
            continue;
        }
        let Some(id) = merged.instance[i] else {
            return Err(Error::invalid(format!("dynamic point {i} has no instance")));
        };
        let key = GroupKey { instance: id, k: merged.k[i] };
        if out.contains_key(&key) {
            continue;
        }
        let traj = by_id.get(&id).ok_or(Error::UnknownInstance { index: i, instance: id })?;
        out.insert(key, gt_rectification_transform(traj, key.k as usize)?);
    }
    Ok(out)
}

/// Per-point ground-truth flow: `T p - p` for dynamic points, zero elsewhere.
pub fn gt_scene_flow(merged: &MergedCloud, trajectories: &[ObjectTrajectory]) -> Result<Vec<Vec3>> {
    let labels = merged.labels()?;
    let transforms = gt_group_transforms(merged, trajectories)?;
    Ok((0..merged.len())
        .into_par_iter()
        .map(|i| {
            if labels[i] != ClassLabel::DynamicFg {
                return Vec3::zeros();
            }
            let key = GroupKey {
                instance: merged.instance[i].expect("checked above"),
                k: merged.k[i],
            };
            let p = merged.points[i];
            transforms[&key].apply(&p) - p
        })
        .collect())
}

/// Moves dynamic points by their flow; other points are returned unchanged.
pub fn rectify_by_flow(merged: &MergedCloud, flows: &[Vec3]) -> Result<Vec<Vec3>> {
    let labels = merged.labels()?;
    check_len("flows", merged.len(), flows.len())?;
    Ok(merged
        .points
        .iter()
        .zip(labels)
        .zip(flows)
        .map(|((p, &l), o)| if l == ClassLabel::DynamicFg { p + o } else { *p })
        .collect())
}

/// Applies the transform of each dynamic point's `(instances[i], k)` group.
pub fn rectify_by_transform(
    merged: &MergedCloud,
    instances: &[Option<u32>],
    transforms: &HashMap<GroupKey, RigidTransform>,
) -> Result<Vec<Vec3>> {
    let labels = merged.labels()?;
    check_len("instances", merged.len(), instances.len())?;
    (0..merged.len())
        .into_par_iter()
        .map(|i| {
            let p = merged.points[i];
            if labels[i] != ClassLabel::DynamicFg {
                return Ok(p);
            }
            let k = merged.k[i];
            let unassigned = |instance| Error::UnassignedPoint { index: i, instance, k };
            let instance = instances[i].ok_or_else(|| unassigned(u32::MAX))?;
            let t = transforms.get(&GroupKey { instance, k }).ok_or_else(|| unassigned(instance))?;
            Ok(t.apply(&p))
        })
        .collect()
}

/// Extent of `points` along the horizontal direction `heading`.
pub fn footprint_extent(points: &[Vec3], heading: f64) -> f64 {
    let (s, c) = heading.sin_cos();
    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = c * p.x + s * p.y;
        (lo.min(d), hi.max(d))
    });
    if points.is_empty() {
        0.0
    } else {
        hi - lo
    }
}
