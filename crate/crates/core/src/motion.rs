//! Instance grouping and per-group rigid motion.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{gt_rectification_transform, ClassLabel, GroupKey, MergedCloud};
use crate::error::{check_len, Error, Result};
use crate::geometry::{quaternion_from_matrix, RigidTransform, SevenVector, Vec2, Vec3};
use crate::numeric::exact_sum;
use crate::sim::ObjectTrajectory;

pub const DBSCAN_EPS: f64 = 1.0;
pub const DBSCAN_MIN_PTS: usize = 5;

/// Density-based clustering in the plane. Points are scanned in index order
/// and clusters numbered in discovery order; a border point joins the first
/// cluster that reaches it. Noise is `None`.
pub fn dbscan(points: &[Vec2], eps: f64, min_pts: usize) -> Result<Vec<Option<u32>>> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    if min_pts == 0 {
        return Err(Error::invalid("min_pts must be at least 1"));
    }
    let cell = |p: &Vec2| ((p.x / eps).floor() as i64, (p.y / eps).floor() as i64);
    let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        cells.entry(cell(p)).or_default().push(i);
    }
    let eps2 = eps * eps;
    let region = |i: usize| -> Vec<usize> {
        let (cx, cy) = cell(&points[i]);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = cells.get(&(cx + dx, cy + dy)) {
                    out.extend(bucket.iter().copied().filter(|&j| (points[j] - points[i]).norm_squared() <= eps2));
                }
            }
        }
        out.sort_unstable();
        out
    };

    let mut labels = vec![None; points.len()];
    let mut visited = vec![false; points.len()];
    let mut next = 0u32;
    for i in 0..points.len() {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seeds = region(i);
        if seeds.len() < min_pts {
            continue;
        }
        let id = next;
        next += 1;
        labels[i] = Some(id);
        let mut queue: VecDeque<usize> = seeds.into();
        while let Some(q) = queue.pop_front() {
            if labels[q].is_none() {
                labels[q] = Some(id);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let around = region(q);
            if around.len() >= min_pts {
                queue.extend(around.into_iter().filter(|&j| !visited[j]));
            }
        }
    }
    Ok(labels)
}

/// Clusters the dynamic points of `merged` in the ground plane. Returns one
/// instance id per point, `None` for non-dynamic points and noise.
pub fn segment_dynamic(merged: &MergedCloud, eps: f64, min_pts: usize) -> Result<Vec<Option<u32>>> {
    let dynamic = merged.indices_with(ClassLabel::DynamicFg)?;
    let xy: Vec<Vec2> = dynamic.iter().map(|&i| Vec2::new(merged.points[i].x, merged.points[i].y)).collect();
    let clusters = dbscan(&xy, eps, min_pts)?;
    let mut out = vec![None; merged.len()];
    for (&i, c) in dynamic.iter().zip(clusters) {
        out[i] = c;
    }
    Ok(out)
}

/// All points of one instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalGroup {
    pub instance: u32,
    pub members: Vec<usize>,
}

/// Points of one instance sharing a sweep index.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalGroup {
    pub instance: u32,
    pub k: u32,
    pub members: Vec<usize>,
    pub centroid: Vec3,
}

impl LocalGroup {
    pub fn key(&self) -> GroupKey {
        GroupKey {
            instance: self.instance,
            k: self.k,
        }
    }
}

/// Groups point indices by instance id, ordered by id.
pub fn global_groups(instances: &[Option<u32>]) -> Vec<GlobalGroup> {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        if let Some(id) = inst {
            by_id.entry(*id).or_default().push(i);
        }
    }
    by_id
        .into_iter()
        .map(|(instance, members)| GlobalGroup { instance, members })
        .collect()
}

/// Arithmetic mean, rounded correctly per axis so the result does not
/// depend on the order of `points`.
pub fn centroid(points: impl IntoIterator<Item = Vec3> + Clone) -> Option<Vec3> {
    let n = points.clone().into_iter().count();
    if n == 0 {
        return None;
    }
    let axis = |a: usize| exact_sum(points.clone().into_iter().map(|p| p[a])) / n as f64;
    Some(Vec3::new(axis(0), axis(1), axis(2)))
}

/// Splits a global group by sweep index, ordered by ascending `k`.
pub fn split_local_groups(group: &GlobalGroup, points: &[Vec3], timestamps: &[u32]) -> Vec<LocalGroup> {
    let mut by_k: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in &group.members {
        by_k.entry(timestamps[i]).or_default().push(i);
    }
    by_k.into_iter()
        .map(|(k, members)| LocalGroup {
            instance: group.instance,
            k,
            centroid: centroid(members.iter().map(|&i| points[i])).expect("non-empty"),
            members,
        })
        .collect()
}

fn max_into(acc: &mut [f64], row: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(row) {
        if v.total_cmp(a).is_gt() {
            *a = v;
        }
    }
}

/// Offset encoding that passes the centered coordinates through unchanged.
pub fn identity_offset(d: &Vec3) -> Vec<f64> {
    vec![d.x, d.y, d.z]
}

/// Channelwise max over members of `[feature ; offset_transform(p - centroid)]`.
pub fn local_group_features<F>(points: &[Vec3], features: &[&[f64]], offset_transform: F) -> Result<Vec<f64>>
where
    F: Fn(&Vec3) -> Vec<f64>,
{
    check_len("point features", points.len(), features.len())?;
    let c = centroid(points.iter().copied()).ok_or(Error::EmptyInput("local group"))?;
    let mut out: Option<Vec<f64>> = None;
    for (p, f) in points.iter().zip(features) {
        let mut row = f.to_vec();
        row.extend(offset_transform(&(p - c)));
        match &mut out {
            None => out = Some(row),
            Some(acc) => {
                check_len("local feature width", acc.len(), row.len())?;
                max_into(acc, &row);
            }
        }
    }
    Ok(out.expect("non-empty"))
}

/// Channelwise max over local group features.
pub fn global_group_features(local: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (first, rest) = local.split_first().ok_or(Error::EmptyInput("global group"))?;
    let mut acc = first.clone();
    for f in rest {
        check_len("local feature width", acc.len(), f.len())?;
        max_into(&mut acc, f);
    }
    Ok(acc)
}

fn centered_cross_covariance(src: &[Vec3], dst: &[Vec3]) -> (Vec3, Vec3, Matrix3<f64>, Matrix3<f64>) {
    let cs = centroid(src.iter().copied()).expect("non-empty");
    let cd = centroid(dst.iter().copied()).expect("non-empty");
    let mut h = Matrix3::zeros();
    let mut ss = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - cs, d - cd);
        h += a * b.transpose();
        ss += a * a.transpose();
    }
    (cs, cd, h, ss)
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]`.
pub fn fit_rigid_transform(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    check_len("correspondences", src.len(), dst.len())?;
    if src.len() < 3 {
        return Err(Error::Degenerate(format!("{} correspondences, need at least 3", src.len())));
    }
    let (cs, cd, h, spread) = centered_cross_covariance(src, dst);
    let mut eig = SymmetricEigen::new(spread).eigenvalues.as_slice().to_vec();
    eig.sort_by(f64::total_cmp);
    if !(eig[1] > 1e-12 * eig[2].max(f64::MIN_POSITIVE)) {
        return Err(Error::Degenerate("source points are collinear".into()));
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    let q = quaternion_from_matrix(&r);
    let t = cd - q * cs;
    Ok(RigidTransform::new(q, t))
}

/// [`fit_rigid_transform`] encoded as translation plus quaternion.
pub fn estimate_rigid_transform(src: &[Vec3], dst: &[Vec3]) -> Result<SevenVector> {
    fit_rigid_transform(src, dst).map(SevenVector::from)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// Rigid fit on ground-truth point correspondences.
    #[default]
    OracleFit,
    /// Ground-truth transforms passed through.
    Gt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRectification {
    pub key: GroupKey,
    pub transform: RigidTransform,
    /// Set when the group could not be fitted and its centroid shift to the
    /// keyframe group was used instead.
    pub fallback: bool,
}

pub fn transform_map(groups: &[GroupRectification]) -> HashMap<GroupKey, RigidTransform> {
    groups.iter().map(|g| (g.key, g.transform)).collect()
}

/// Position of each attributed point among the points of the same object in
/// the same sweep. Sweeps observe an object's surface samples in a fixed
/// order, so equal ranks across sweeps are the same physical point.
pub fn surface_ranks(merged: &MergedCloud) -> Vec<Option<u32>> {
    let mut counters: HashMap<(u32, usize), u32> = HashMap::new();
    merged
        .instance
        .iter()
        .zip(&merged.sweep_index)
        .map(|(inst, &sweep)| {
            inst.map(|id| {
                let c = counters.entry((id, sweep)).or_insert(0);
                *c += 1;
                *c - 1
            })
        })
        .collect()
}

/// One rectification transform per local group of every global group.
///
/// Keyframe groups get the identity. In oracle-fit mode each other group is
/// registered onto the keyframe observations of the same surface points;
/// groups with fewer than three usable correspondences or a degenerate
/// configuration fall back to the centroid shift towards the keyframe group
/// and are flagged. A global group without keyframe points is an error.
pub fn predict_group_rectifications(
    merged: &MergedCloud,
    groups: &[GlobalGroup],
    mode: FitMode,
    trajectories: &[ObjectTrajectory],
) -> Result<Vec<GroupRectification>> {
    let ranks = surface_ranks(merged);
    let mut keyframe_points: HashMap<(u32, u32), Vec3> = HashMap::new();
    if mode == FitMode::OracleFit {
        for i in 0..merged.len() {
            if let (0, Some(id), Some(r)) = (merged.k[i], merged.instance[i], ranks[i]) {
                keyframe_points.insert((id, r), merged.points[i]);
            }
        }
    }
    let by_id: HashMap<u32, &ObjectTrajectory> = trajectories.iter().map(|t| (t.object_id, t)).collect();

    let per_group: Vec<Result<Vec<GroupRectification>>> = groups
        .par_iter()
        .map(|g| {
            let locals = split_local_groups(g, &merged.points, &merged.k);
            let key_centroid = locals.iter().find(|l| l.k == 0).map(|l| l.centroid);
            if mode == FitMode::OracleFit && key_centroid.is_none() {
                return Err(Error::MissingKeyframeGroup(g.instance));
            }
            locals
                .iter()
                .map(|l| {
                    let ident = |fallback| GroupRectification {
                        key: l.key(),
                        transform: RigidTransform::identity(),
                        fallback,
                    };
                    if l.k == 0 {
                        return Ok(ident(false));
                    }
                    match mode {
                        FitMode::Gt => {
                            let first = l.members[0];
                            let id = merged.instance[first].ok_or_else(|| {
                                Error::invalid(format!("point {first} has no ground-truth instance"))
                            })?;
                            let traj = by_id.get(&id).ok_or(Error::UnknownInstance { index: first, instance: id })?;
                            Ok(GroupRectification {
                                key: l.key(),
                                transform: gt_rectification_transform(traj, l.k as usize)?,
                                fallback: false,
                            })
                        }
                        FitMode::OracleFit => {
                            let (src, dst): (Vec<Vec3>, Vec<Vec3>) = l
                                .members
                                .iter()
                                .filter_map(|&i| {
                                    let key = (merged.instance[i]?, ranks[i]?);
                                    keyframe_points.get(&key).map(|d| (merged.points[i], *d))
                                })
                                .unzip();
                            match fit_rigid_transform(&src, &dst) {
                                Ok(t) => Ok(GroupRectification {
                                    key: l.key(),
                                    transform: t,
                                    fallback: false,
                                }),
                                Err(Error::Degenerate(_)) => Ok(GroupRectification {
                                    key: l.key(),
                                    transform: RigidTransform::from_translation(
                                        key_centroid.expect("checked") - l.centroid,
                                    ),
                                    fallback: true,
                                }),
                                Err(e) => Err(e),
                            }
                        }
                    }
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for g in per_group {
        out.extend(g?);
    }
    Ok(out)
}
