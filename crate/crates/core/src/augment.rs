//! Global flip, scale and rotation applied jointly to points, poses, boxes
//! and flows, plus ground-truth sampling that carries each object's past
//! sweeps along with it.

use std::f64::consts::{FRAC_PI_8, PI};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::MergedCloud;
use crate::container::{self, flatten, schema_error, unflatten};
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, points_in_box, Box3D, ObjectClass, RigidTransform, Vec3};
use crate::sim::{ObjectTrajectory, SequenceSample, TrajectoryBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    /// Mirror across the xz-plane (negate y).
    X,
    /// Mirror across the yz-plane (negate x).
    Y,
}

/// One global similarity of the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalAugmentation {
    Flip(FlipAxis),
    Scale(f64),
    /// Rotation about the world z axis, radians.
    Rotate(f64),
}

impl GlobalAugmentation {
    fn validate(self) -> Result<()> {
        match self {
            GlobalAugmentation::Scale(s) if !(s.is_finite() && s > 0.0) => {
                Err(Error::invalid(format!("scale factor must be positive, got {s}")))
            }
            GlobalAugmentation::Rotate(a) if !a.is_finite() => Err(Error::invalid("rotation angle must be finite")),
            _ => Ok(()),
        }
    }

    /// Image of a world point.
    pub fn map_point(self, p: &Vec3) -> Vec3 {
        match self {
            GlobalAugmentation::Flip(FlipAxis::X) => Vec3::new(p.x, -p.y, p.z),
            GlobalAugmentation::Flip(FlipAxis::Y) => Vec3::new(-p.x, p.y, p.z),
            GlobalAugmentation::Scale(s) => p * s,
            GlobalAugmentation::Rotate(a) => RigidTransform::from_yaw(a, Vec3::zeros()).apply(p),
        }
    }

    /// Image of a displacement; the map is linear so this equals
    /// [`map_point`](Self::map_point).
    pub fn map_vector(self, v: &Vec3) -> Vec3 {
        self.map_point(v)
    }

    pub fn map_box(self, b: &Box3D) -> Result<Box3D> {
        let mut out = b.clone();
        out.center = self.map_point(&b.center);
        let (yaw, size) = match self {
            GlobalAugmentation::Flip(FlipAxis::X) => (-b.yaw, b.size),
            GlobalAugmentation::Flip(FlipAxis::Y) => (PI - b.yaw, b.size),
            GlobalAugmentation::Scale(s) => (b.yaw, b.size.map(|v| v * s)),
            GlobalAugmentation::Rotate(a) => (b.yaw + a, b.size),
        };
        let fresh = Box3D::new(out.center, size, yaw, b.class)?;
        out.yaw = fresh.yaw;
        out.size = fresh.size;
        Ok(out)
    }

    /// Image of an object pose. Flips also mirror the body frame across its
    /// own xz-plane so the pose stays proper and the heading follows the
    /// mirrored motion.
    pub fn map_pose(self, t: &RigidTransform) -> RigidTransform {
        match self {
            GlobalAugmentation::Flip(FlipAxis::X) => mirror_y(t),
            GlobalAugmentation::Flip(FlipAxis::Y) => rotate_z(PI).compose(&mirror_y(t)),
            GlobalAugmentation::Scale(s) => RigidTransform::new(*t.rotation(), t.translation() * s),
            GlobalAugmentation::Rotate(a) => rotate_z(a).compose(t),
        }
    }

    /// Image of an ego pose; sensor-frame points map by [`map_sensor_point`](Self::map_sensor_point).
    pub fn map_ego_pose(self, t: &RigidTransform) -> RigidTransform {
        self.map_pose(t)
    }

    /// Image of a point expressed in a body or sensor frame.
    pub fn map_sensor_point(self, p: &Vec3) -> Vec3 {
        match self {
            GlobalAugmentation::Flip(_) => Vec3::new(p.x, -p.y, p.z),
            GlobalAugmentation::Scale(s) => p * s,
            GlobalAugmentation::Rotate(_) => *p,
        }
    }

    fn scale_factor(self) -> f64 {
        match self {
            GlobalAugmentation::Scale(s) => s,
            _ => 1.0,
        }
    }

    pub fn apply_to_sample(self, sample: &SequenceSample) -> Result<SequenceSample> {
        self.validate()?;
        let mut out = sample.clone();
        for sweep in &mut out.sweeps {
            sweep.ego_pose = self.map_ego_pose(&sweep.ego_pose);
            for p in &mut sweep.points {
                *p = self.map_sensor_point(p);
            }
        }
        for traj in &mut out.trajectories {
            for pose in &mut traj.poses {
                *pose = self.map_pose(pose);
            }
            traj.size = traj.size.map(|v| v * self.scale_factor());
        }
        out.boxes = sample.boxes.iter().map(|b| self.map_box(b)).collect::<Result<_>>()?;
        out.metric_scale *= self.scale_factor();
        Ok(out)
    }

    pub fn apply_to_merged(self, merged: &MergedCloud) -> Result<MergedCloud> {
        self.validate()?;
        let mut out = merged.clone();
        for p in &mut out.points {
            *p = self.map_point(p);
        }
        if let Some(flows) = &mut out.flows {
            for f in flows {
                *f = self.map_vector(f);
            }
        }
        out.metric_scale *= self.scale_factor();
        Ok(out)
    }
}

fn rotate_z(a: f64) -> RigidTransform {
    RigidTransform::from_yaw(a, Vec3::zeros())
}

/// `F T F` for `F = diag(1, -1, 1)`.
fn mirror_y(t: &RigidTransform) -> RigidTransform {
    let [w, x, y, z] = t.wxyz();
    let q = UnitQuaternion::new_unchecked(Quaternion::new(w, -x, y, -z));
    let c = t.translation();
    RigidTransform::new(q, Vec3::new(c.x, -c.y, c.z))
}

/// Anything a global augmentation can be applied to.
pub trait Augment: Sized {
    fn augment(&self, aug: GlobalAugmentation) -> Result<Self>;
}

impl Augment for SequenceSample {
    fn augment(&self, aug: GlobalAugmentation) -> Result<Self> {
        aug.apply_to_sample(self)
    }
}

impl Augment for MergedCloud {
    fn augment(&self, aug: GlobalAugmentation) -> Result<Self> {
        aug.apply_to_merged(self)
    }
}

pub fn global_flip<T: Augment>(target: &T, axis: FlipAxis) -> Result<T> {
    target.augment(GlobalAugmentation::Flip(axis))
}

pub fn global_scale<T: Augment>(target: &T, factor: f64) -> Result<T> {
    target.augment(GlobalAugmentation::Scale(factor))
}

pub fn global_rotate<T: Augment>(target: &T, angle: f64) -> Result<T> {
    target.augment(GlobalAugmentation::Rotate(angle))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_x_prob: f64,
    pub flip_y_prob: f64,
    pub scale_range: [f64; 2],
    pub rotation_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_x_prob: 0.5,
            flip_y_prob: 0.5,
            scale_range: [0.95, 1.05],
            rotation_range: [-FRAC_PI_8, FRAC_PI_8],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_x_prob", self.flip_x_prob), ("flip_y_prob", self.flip_y_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("scale_range must be a positive interval"));
        }
        let [lo, hi] = self.rotation_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::invalid("rotation_range must be a finite interval"));
        }
        Ok(())
    }

    /// Draws flips, then a scale, then a rotation.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Vec<GlobalAugmentation>> {
        self.validate()?;
        let mut out = Vec::new();
        if rng.random_bool(self.flip_x_prob) {
            out.push(GlobalAugmentation::Flip(FlipAxis::X));
        }
        if rng.random_bool(self.flip_y_prob) {
            out.push(GlobalAugmentation::Flip(FlipAxis::Y));
        }
        out.push(GlobalAugmentation::Scale(uniform(rng, self.scale_range)));
        out.push(GlobalAugmentation::Rotate(uniform(rng, self.rotation_range)));
        Ok(out)
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn apply_all<T: Augment + Clone>(target: &T, augs: &[GlobalAugmentation]) -> Result<T> {
    augs.iter().try_fold(target.clone(), |acc, &a| acc.augment(a))
}

/// Longest trajectory kept per database entry, in sweeps.
pub const MAX_TRAJECTORY_STEPS: usize = 10;
/// Placement attempts allowed per requested insertion.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct GtDatabaseEntry {
    pub class: ObjectClass,
    pub keyframe_box: Box3D,
    /// World poses, oldest first, at most [`MAX_TRAJECTORY_STEPS`] long.
    pub trajectory: ObjectTrajectory,
    /// `points[k]` holds the body-frame points observed at sweep `k`.
    pub points: Vec<Vec<Vec3>>,
}

impl GtDatabaseEntry {
    pub fn num_points(&self) -> usize {
        self.points.iter().map(Vec::len).sum()
    }

    /// World positions of the points at sweep `k` under `placement`.
    pub fn world_points(&self, k: usize, placement: &RigidTransform) -> Result<Vec<Vec3>> {
        let pose = placement.compose(self.trajectory.pose(k)?);
        Ok(self.points[k].iter().map(|b| pose.apply(b)).collect())
    }
}

pub type GtDatabase = Vec<GtDatabaseEntry>;

/// One entry per object observed by at least one keyframe point.
pub fn build_gt_database(samples: &[SequenceSample]) -> Result<GtDatabase> {
    let mut db = Vec::new();
    for sample in samples {
        for traj in &sample.trajectories {
            let steps = (traj.max_k() + 1).min(MAX_TRAJECTORY_STEPS);
            let mut points = vec![Vec::new(); steps];
            for sweep in &sample.sweeps {
                let k = sweep.k as usize;
                if k >= steps {
                    continue;
                }
                let to_body = traj.pose(k)?.inverse().compose(&sweep.ego_pose);
                for (p, id) in sweep.points.iter().zip(&sweep.source_ids) {
                    if *id == Some(traj.object_id) {
                        points[k].push(to_body.apply(p));
                    }
                }
            }
            if points[0].is_empty() {
                continue;
            }
            let trajectory = ObjectTrajectory {
                poses: traj.poses[traj.poses.len() - steps..].to_vec(),
                ..traj.clone()
            };
            db.push(GtDatabaseEntry {
                class: traj.class,
                keyframe_box: trajectory.box_at(0)?,
                trajectory,
                points,
            });
        }
    }
    Ok(db)
}

/// Inserts `entry` moved by `placement` unless its keyframe box overlaps an
/// existing box. Returns whether it was inserted.
pub fn insert_entry(sample: &mut SequenceSample, entry: &GtDatabaseEntry, placement: &RigidTransform) -> Result<bool> {
    let candidate = place_box(&entry.keyframe_box, placement)?;
    for b in &sample.boxes {
        if bev_iou(&candidate, b)? > 0.0 {
            return Ok(false);
        }
    }
    let object_id = sample
        .trajectories
        .iter()
        .map(|t| t.object_id + 1)
        .chain(sample.boxes.iter().filter_map(|b| b.object_id.map(|i| i + 1)))
        .max()
        .unwrap_or(0);
    let steps = (entry.trajectory.max_k() + 1).min(sample.max_k() as usize + 1);
    for sweep in &mut sample.sweeps {
        let k = sweep.k as usize;
        if k >= steps {
            continue;
        }
        let to_sensor = sweep.ego_pose.inverse();
        for w in entry.world_points(k, placement)? {
            sweep.points.push(to_sensor.apply(&w));
            sweep.source_ids.push(Some(object_id));
        }
    }
    let poses = entry.trajectory.poses[entry.trajectory.poses.len() - steps..]
        .iter()
        .map(|p| placement.compose(p))
        .collect();
    sample.trajectories.push(ObjectTrajectory {
        object_id,
        class: entry.class,
        size: entry.trajectory.size,
        poses,
    });
    sample.boxes.push(candidate.with_object_id(object_id));
    Ok(true)
}

fn place_box(b: &Box3D, placement: &RigidTransform) -> Result<Box3D> {
    let pose = placement.compose(&b.pose());
    Box3D::new(*pose.translation(), b.size, pose.yaw(), b.class)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub requested: usize,
    pub inserted: usize,
    pub attempts: usize,
    /// Fewer objects than requested could be placed without overlap.
    pub short: bool,
}

/// Inserts up to `n_insert` database objects, each with the points of every
/// stored sweep. Placements rotate the stored trajectory about the world z
/// axis by a random angle; overlapping keyframe boxes are rejected.
pub fn gt_sampling_with_trajectory(
    sample: &SequenceSample,
    database: &[GtDatabaseEntry],
    n_insert: usize,
    rng: &mut impl Rng,
) -> Result<(SequenceSample, SamplingReport)> {
    if database.is_empty() {
        return Err(Error::EmptyInput("ground-truth database is empty"));
    }
    let mut out = sample.clone();
    let mut report = SamplingReport {
        requested: n_insert,
        inserted: 0,
        attempts: 0,
        short: false,
    };
    let budget = n_insert * MAX_PLACEMENT_ATTEMPTS;
    while report.inserted < n_insert && report.attempts < budget {
        report.attempts += 1;
        let entry = &database[rng.random_range(0..database.len())];
        let placement = rotate_z(rng.random_range(-PI..PI));
        if insert_entry(&mut out, entry, &placement)? {
            report.inserted += 1;
        }
    }
    report.short = report.inserted < n_insert;
    if report.short {
        log::warn!("inserted {} of {} sampled objects", report.inserted, n_insert);
    }
    Ok((out, report))
}

/// Fraction of an entry's body-frame points inside its box, boundary inclusive.
pub fn entry_containment(entry: &GtDatabaseEntry) -> f64 {
    let body = Box3D {
        center: Vec3::zeros(),
        yaw: 0.0,
        object_id: None,
        score: None,
        ..entry.keyframe_box.clone()
    };
    let all: Vec<Vec3> = entry.points.iter().flatten().copied().collect();
    if all.is_empty() {
        return 1.0;
    }
    points_in_box(&body, &all).iter().filter(|&&b| b).count() as f64 / all.len() as f64
}

pub const GTDB_FORMAT: &str = "flowbev-gtdb";
pub const GTDB_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct GtDbFile {
    format: String,
    version: u64,
    entries: Vec<EntryBlock>,
}

#[derive(Serialize, Deserialize)]
struct EntryBlock {
    trajectory: TrajectoryBlock,
    keyframe_box: Box3D,
    steps: Vec<StepBlock>,
}

#[derive(Serialize, Deserialize)]
struct StepBlock {
    k: usize,
    n: usize,
    points: Vec<f64>,
}

pub fn write_gt_database(db: &[GtDatabaseEntry], path: impl AsRef<Path>) -> Result<()> {
    let file = GtDbFile {
        format: GTDB_FORMAT.into(),
        version: GTDB_VERSION,
        entries: db
            .iter()
            .map(|e| EntryBlock {
                trajectory: TrajectoryBlock::from(&e.trajectory),
                keyframe_box: e.keyframe_box.clone(),
                steps: e
                    .points
                    .iter()
                    .enumerate()
                    .map(|(k, pts)| StepBlock {
                        k,
                        n: pts.len(),
                        points: flatten(pts),
                    })
                    .collect(),
            })
            .collect(),
    };
    container::write(path.as_ref(), &file)
}

pub fn read_gt_database(path: impl AsRef<Path>) -> Result<GtDatabase> {
    let (file, _): (GtDbFile, _) = container::read(path.as_ref(), GTDB_FORMAT, GTDB_VERSION)?;
    file.entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let trajectory = e.trajectory.into_trajectory(&format!("entries[{i}].trajectory"))?;
            if trajectory.poses.is_empty() || trajectory.poses.len() > MAX_TRAJECTORY_STEPS {
                return Err(schema_error(
                    format!("entries[{i}].trajectory.poses"),
                    format!("expected 1 to {MAX_TRAJECTORY_STEPS} poses"),
                ));
            }
            if e.steps.len() != trajectory.poses.len() {
                return Err(schema_error(format!("entries[{i}].steps"), "one step per pose expected"));
            }
            let mut points = Vec::with_capacity(e.steps.len());
            for (j, s) in e.steps.into_iter().enumerate() {
                if s.k != j {
                    return Err(schema_error(format!("entries[{i}].steps[{j}].k"), "steps must be ordered by k"));
                }
                points.push(unflatten(&format!("entries[{i}].steps[{j}].points"), &s.points, s.n)?);
            }
            Ok(GtDatabaseEntry {
                class: trajectory.class,
                keyframe_box: e.keyframe_box,
                trajectory,
                points,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{emc_merge, ClassLabel, DYNAMIC_THRESHOLD};
    use crate::sim::{generate_sequence, ObjectSpec, ScenarioConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const ALL_KINDS: [GlobalAugmentation; 5] = [
        GlobalAugmentation::Flip(FlipAxis::X),
        GlobalAugmentation::Flip(FlipAxis::Y),
        GlobalAugmentation::Scale(1.04),
        GlobalAugmentation::Rotate(0.3),
        GlobalAugmentation::Rotate(-FRAC_PI_8),
    ];

    fn scene(seed: u64) -> SequenceSample {
        let cfg = ScenarioConfig {
            num_objects: 4,
            background_points_per_sweep: 200,
            points_per_object_per_sweep: 40,
            ego_yaw_rate: 0.2,
            ..ScenarioConfig::default()
        };
        generate_sequence(&cfg.with_seed(seed)).unwrap()
    }

    fn annotated(sample: &SequenceSample) -> MergedCloud {
        let mut m = emc_merge(sample).unwrap();
        m.annotate(&sample.trajectories, DYNAMIC_THRESHOLD).unwrap();
        m
    }

    #[test]
    fn point_and_box_cases() {
        let p = Vec3::new(1.0, 2.0, 0.0);
        assert_eq!(GlobalAugmentation::Flip(FlipAxis::X).map_point(&p), Vec3::new(1.0, -2.0, 0.0));
        assert_eq!(GlobalAugmentation::Scale(2.0).map_point(&Vec3::new(1.0, 1.0, 1.0)), Vec3::new(2.0, 2.0, 2.0));
        let r = GlobalAugmentation::Rotate(PI / 2.0).map_point(&Vec3::new(1.0, 0.0, 0.0));
        assert!((r - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);

        let b = Box3D::new(Vec3::new(1.0, 2.0, 0.0), [4.0, 2.0, 1.5], PI / 4.0, ObjectClass::Car).unwrap();
        assert_abs_diff_eq!(GlobalAugmentation::Flip(FlipAxis::X).map_box(&b).unwrap().yaw, -PI / 4.0);
        assert_abs_diff_eq!(GlobalAugmentation::Flip(FlipAxis::Y).map_box(&b).unwrap().yaw, 3.0 * PI / 4.0);
        assert_eq!(GlobalAugmentation::Scale(2.0).map_box(&b).unwrap().size[0], 8.0);
        assert!(GlobalAugmentation::Scale(0.0).apply_to_sample(&scene(0)).is_err());
    }

    #[test]
    fn identities_and_involutions() {
        let s = scene(1);
        assert_eq!(global_scale(&s, 1.0).unwrap(), s);
        let r0 = global_rotate(&s, 0.0).unwrap();
        assert_eq!(emc_merge(&r0).unwrap().points, emc_merge(&s).unwrap().points);
        for axis in [FlipAxis::X, FlipAxis::Y] {
            let twice = global_flip(&global_flip(&s, axis).unwrap(), axis).unwrap();
            let (a, b) = (emc_merge(&twice).unwrap(), emc_merge(&s).unwrap());
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!((p - q).norm() < 1e-12);
            }
        }
        let m = annotated(&s);
        let twice = global_flip(&global_flip(&m, FlipAxis::X).unwrap(), FlipAxis::X).unwrap();
        assert_eq!(twice, m);
    }

    #[test]
    fn boxes_follow_trajectories() {
        let s = scene(2);
        for aug in ALL_KINDS {
            let a = aug.apply_to_sample(&s).unwrap();
            for (t, b) in a.trajectories.iter().zip(&a.boxes) {
                let from_pose = t.box_at(0).unwrap();
                assert!((from_pose.center - b.center).norm() < 1e-12);
                assert_abs_diff_eq!(from_pose.yaw, b.yaw, epsilon = 1e-12);
                assert_eq!(from_pose.size, b.size);
            }
        }
    }

    #[test]
    fn pre_merge_equals_post_merge() {
        let s = scene(3);
        let m = annotated(&s);
        for aug in ALL_KINDS {
            let pre = annotated(&aug.apply_to_sample(&s).unwrap());
            let post = aug.apply_to_merged(&m).unwrap();
            assert_eq!(pre.labels, post.labels);
            assert_eq!(pre.metric_scale, post.metric_scale);
            for i in 0..pre.len() {
                assert!((pre.points[i] - post.points[i]).norm() < 1e-9);
                assert!((pre.flows.as_ref().unwrap()[i] - post.flows.as_ref().unwrap()[i]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn sampler_respects_ranges() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            for a in cfg.sample(&mut rng).unwrap() {
                match a {
                    GlobalAugmentation::Scale(s) => assert!((0.95..=1.05).contains(&s)),
                    GlobalAugmentation::Rotate(r) => assert!(r.abs() <= FRAC_PI_8),
                    GlobalAugmentation::Flip(_) => {}
                }
            }
        }
        let bad = AugmentConfig {
            flip_x_prob: 2.0,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    fn mover(center: [f64; 2], speed: f64) -> ObjectSpec {
        ObjectSpec {
            class: ObjectClass::Car,
            size: None,
            center,
            yaw: 0.0,
            speed,
            yaw_rate: 0.0,
        }
    }

    fn scripted(objects: Vec<ObjectSpec>, background: usize) -> SequenceSample {
        generate_sequence(&ScenarioConfig {
            num_objects: 0,
            scripted_objects: objects,
            background_points_per_sweep: background,
            points_per_object_per_sweep: 30,
            ..ScenarioConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn database_has_one_entry_per_object() {
        let s = scripted(vec![mover([0.0, 0.0], 0.0), mover([10.0, 0.0], 8.0), mover([-10.0, 5.0], 3.0)], 10);
        let db = build_gt_database(std::slice::from_ref(&s)).unwrap();
        assert_eq!(db.len(), 3);
        for e in &db {
            assert!(e.trajectory.poses.len() <= MAX_TRAJECTORY_STEPS);
            assert_eq!(entry_containment(e), 1.0);
        }
        // Parked object: the same body-frame samples at every step.
        for k in 1..db[0].points.len() {
            for (a, b) in db[0].points[k].iter().zip(&db[0].points[0]) {
                assert!((a - b).norm() < 1e-9);
            }
        }
        // Re-placing at the original pose reproduces the merged points.
        let merged = emc_merge(&s).unwrap();
        let entry = &db[1];
        for k in 0..entry.points.len() {
            let original: Vec<Vec3> = (0..merged.len())
                .filter(|&i| merged.instance[i] == Some(1) && merged.k[i] as usize == k)
                .map(|i| merged.points[i])
                .collect();
            let replaced = entry.world_points(k, &RigidTransform::identity()).unwrap();
            assert_eq!(original.len(), replaced.len());
            for (a, b) in original.iter().zip(&replaced) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn insertion_into_empty_scene_spans_all_sweeps() {
        let source = scripted(vec![mover([10.0, 0.0], 8.0)], 0);
        let db = build_gt_database(&[source]).unwrap();
        let empty = scripted(vec![], 50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (aug, report) = gt_sampling_with_trajectory(&empty, &db, 1, &mut rng).unwrap();
        assert_eq!((report.inserted, report.short), (1, false));
        let m = annotated(&aug);
        let mut ks: Vec<u32> = (0..m.len()).filter(|&i| m.instance[i].is_some()).map(|i| m.k[i]).collect();
        ks.dedup();
        assert_eq!(ks.len(), 10);
        let labels = m.labels().unwrap();
        assert!((0..m.len()).filter(|&i| m.instance[i].is_some()).all(|i| labels[i] == ClassLabel::DynamicFg));
    }

    #[test]
    fn overlapping_insertion_is_rejected() {
        let s = scripted(vec![mover([10.0, 0.0], 8.0)], 20);
        let db = build_gt_database(std::slice::from_ref(&s)).unwrap();
        let mut target = s.clone();
        assert!(!insert_entry(&mut target, &db[0], &RigidTransform::identity()).unwrap());
        assert_eq!(target, s);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let single = vec![db[0].clone()];
        // A closed ring of parked cars at the entry's radius blocks every
        // rotation about the origin.
        let ring = (0..20)
            .map(|i| {
                let a = PI / 10.0 * i as f64;
                ObjectSpec {
                    yaw: a + PI / 2.0,
                    ..mover([10.0 * a.cos(), 10.0 * a.sin()], 0.0)
                }
            })
            .collect();
        let crowded = scripted(ring, 0);
        let (_, report) = gt_sampling_with_trajectory(&crowded, &single, 3, &mut rng).unwrap();
        assert!(report.short);
        assert!(gt_sampling_with_trajectory(&s, &[], 1, &mut rng).is_err());
    }

    #[test]
    fn database_round_trip() {
        let s = scripted(vec![mover([10.0, 0.0], 8.0), mover([0.0, 10.0], 0.0)], 0);
        let db = build_gt_database(&[s]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.json");
        write_gt_database(&db, &path).unwrap();
        assert_eq!(read_gt_database(&path).unwrap(), db);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn sampling_never_overlaps(seed in 0u64..1000, n in 1usize..6) {
            let s = scene(seed);
            let db = build_gt_database(&[scene(seed + 1)]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (aug, report) = gt_sampling_with_trajectory(&s, &db, n, &mut rng).unwrap();
            prop_assert_eq!(aug.boxes.len(), s.boxes.len() + report.inserted);
            for i in 0..aug.boxes.len() {
                for j in i + 1..aug.boxes.len() {
                    prop_assert_eq!(bev_iou(&aug.boxes[i], &aug.boxes[j]).unwrap(), 0.0);
                }
            }
        }

        #[test]
        fn flow_equivariance(seed in 0u64..1000, angle in -PI..PI, scale in 0.5f64..2.0, flip_x in any::<bool>()) {
            let s = scene(seed);
            let m = annotated(&s);
            let aug = [
                GlobalAugmentation::Rotate(angle),
                GlobalAugmentation::Scale(scale),
                GlobalAugmentation::Flip(if flip_x { FlipAxis::X } else { FlipAxis::Y }),
            ];
            for a in aug {
                let am = annotated(&a.apply_to_sample(&s).unwrap());
                prop_assert_eq!(am.labels.as_ref(), m.labels.as_ref());
                for (f, g) in am.flows.as_ref().unwrap().iter().zip(m.flows.as_ref().unwrap()) {
                    prop_assert!((f - a.map_vector(g)).norm() < 1e-9);
                }
            }
        }
    }
}
