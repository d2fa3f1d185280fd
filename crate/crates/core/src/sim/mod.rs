//! Synthetic multi-sweep LiDAR sequences.
//!
//! A scene is a set of rigid cuboid objects moving under a constant speed and
//! yaw-rate model, observed from a moving ego vehicle. Each object carries a
//! fixed set of body-frame surface samples and every sweep observes all of
//! them in the same order, so point `j` of an object in one sweep is the same
//! physical surface point as point `j` in any other sweep. Background points
//! are fixed samples on the ground plane. The world frame is the keyframe ego
//! frame, so the keyframe ego pose is the identity.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, interpolate_pose, Box3D, ObjectClass, RigidTransform, Vec3};

pub(crate) use io::TrajectoryBlock;
pub use io::{read_sequence, read_sequence_with_warnings, write_sequence, SEQUENCE_FORMAT, SEQUENCE_VERSION};

/// An object placed explicitly instead of being drawn at random.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: ObjectClass,
    /// `(length, width, height)`; class default when absent.
    #[serde(default)]
    pub size: Option<[f64; 3]>,
    /// Keyframe BEV center.
    pub center: [f64; 2],
    /// Keyframe heading.
    pub yaw: f64,
    pub speed: f64,
    #[serde(default)]
    pub yaw_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Keyframe plus past sweeps.
    pub num_sweeps: usize,
    /// Seconds between sweeps.
    pub sweep_period: f64,
    pub num_objects: usize,
    /// Speed range of moving objects, m/s.
    pub object_speed: [f64; 2],
    /// Yaw-rate range of moving objects, rad/s.
    pub object_yaw_rate: [f64; 2],
    /// Probability that a random object is parked.
    pub static_object_fraction: f64,
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    pub points_per_object_per_sweep: usize,
    pub background_points_per_sweep: usize,
    /// Half-width of the square BEV region all points stay in, meters.
    pub xy_range: f64,
    pub ground_z: f64,
    /// Isotropic Gaussian noise added in the sensor frame, meters.
    pub noise_sigma: f64,
    /// Classes random objects are drawn from.
    pub classes: Vec<ObjectClass>,
    pub scripted_objects: Vec<ObjectSpec>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_sweeps: 10,
            sweep_period: 0.05,
            num_objects: 6,
            object_speed: [1.0, 12.0],
            object_yaw_rate: [-0.3, 0.3],
            static_object_fraction: 0.3,
            ego_speed: 5.0,
            ego_yaw_rate: 0.0,
            points_per_object_per_sweep: 128,
            background_points_per_sweep: 2000,
            xy_range: 45.0,
            ground_z: -1.8,
            noise_sigma: 0.0,
            classes: vec![
                ObjectClass::Car,
                ObjectClass::Truck,
                ObjectClass::Bus,
                ObjectClass::Pedestrian,
                ObjectClass::Bicycle,
            ],
            scripted_objects: Vec::new(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Seconds between the oldest sweep and the keyframe.
    pub fn window(&self) -> f64 {
        self.num_sweeps.saturating_sub(1) as f64 * self.sweep_period
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::invalid(format!("{field}: {why}")));
        if self.num_sweeps < 1 {
            return bad("num_sweeps", "must be at least 1");
        }
        if !(self.sweep_period.is_finite() && self.sweep_period > 0.0) {
            return bad("sweep_period", "must be positive");
        }
        let [lo, hi] = self.object_speed;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return bad("object_speed", "must be a non-negative [min, max] range");
        }
        let [lo, hi] = self.object_yaw_rate;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad("object_yaw_rate", "must be a [min, max] range");
        }
        if !(0.0..=1.0).contains(&self.static_object_fraction) {
            return bad("static_object_fraction", "must lie in [0, 1]");
        }
        if !(self.ego_speed.is_finite() && self.ego_speed >= 0.0) {
            return bad("ego_speed", "must be non-negative");
        }
        if !self.ego_yaw_rate.is_finite() {
            return bad("ego_yaw_rate", "must be finite");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma", "must be non-negative");
        }
        if !(self.xy_range.is_finite() && self.xy_range > 0.0) {
            return bad("xy_range", "must be positive");
        }
        if !self.ground_z.is_finite() {
            return bad("ground_z", "must be finite");
        }
        if self.num_objects > 0 && self.classes.is_empty() {
            return bad("classes", "must not be empty when num_objects > 0");
        }
        if self.num_objects > 0 && self.placement_margin(self.object_speed[1], 16.0) >= self.xy_range {
            return bad("xy_range", "too small for the configured object speeds and sizes");
        }
        for (i, s) in self.scripted_objects.iter().enumerate() {
            if let Some(size) = s.size {
                if size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return bad(&format!("scripted_objects[{i}].size"), "must be positive");
                }
            }
            if !(s.speed.is_finite() && s.speed >= 0.0) {
                return bad(&format!("scripted_objects[{i}].speed"), "must be non-negative");
            }
        }
        Ok(())
    }

    fn placement_margin(&self, speed: f64, length: f64) -> f64 {
        speed * self.window() + 0.5 * length * std::f64::consts::SQRT_2 + 0.5
    }
}

/// Nominal `(length, width, height)` per class.
pub fn nominal_size(class: ObjectClass) -> [f64; 3] {
    match class {
        ObjectClass::Car => [4.6, 1.95, 1.7],
        ObjectClass::Truck => [6.9, 2.5, 2.85],
        ObjectClass::ConstructionVehicle => [6.5, 2.8, 3.2],
        ObjectClass::Bus => [11.0, 2.95, 3.5],
        ObjectClass::Trailer => [12.0, 2.9, 3.9],
        ObjectClass::Barrier => [0.5, 2.5, 1.0],
        ObjectClass::Motorcycle => [2.1, 0.8, 1.5],
        ObjectClass::Bicycle => [1.75, 0.6, 1.3],
        ObjectClass::Pedestrian => [0.75, 0.7, 1.75],
        ObjectClass::TrafficCone => [0.4, 0.4, 1.05],
    }
}

/// World poses of one object, oldest sweep first.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTrajectory {
    pub object_id: u32,
    pub class: ObjectClass,
    pub size: [f64; 3],
    /// `poses[i]` is the pose at `k = poses.len() - 1 - i`.
    pub poses: Vec<RigidTransform>,
}

impl ObjectTrajectory {
    /// Largest valid sweep index `K`.
    pub fn max_k(&self) -> usize {
        self.poses.len().saturating_sub(1)
    }

    /// Stored pose at integer sweep index `k`.
    pub fn pose(&self, k: usize) -> Result<&RigidTransform> {
        if self.poses.is_empty() || k > self.max_k() {
            return Err(Error::invalid(format!(
                "sweep index {k} outside [0, {}] for object {}",
                self.max_k(),
                self.object_id
            )));
        }
        Ok(&self.poses[self.max_k() - k])
    }

    pub fn keyframe_pose(&self) -> &RigidTransform {
        &self.poses[self.max_k()]
    }

    /// Pose at a possibly fractional sweep index, interpolating between the
    /// two neighbouring stored poses.
    pub fn pose_at(&self, k: f64) -> Result<RigidTransform> {
        if !(k.is_finite() && k >= 0.0 && k <= self.max_k() as f64) {
            return Err(Error::invalid(format!(
                "sweep index {k} outside [0, {}] for object {}",
                self.max_k(),
                self.object_id
            )));
        }
        let lo = k.floor() as usize;
        let frac = k - lo as f64;
        if frac == 0.0 {
            return self.pose(lo).copied();
        }
        interpolate_pose(self.pose(lo)?, self.pose(lo + 1)?, frac)
    }

    pub fn box_at(&self, k: usize) -> Result<Box3D> {
        let pose = self.pose(k)?;
        Ok(Box3D::new(*pose.translation(), self.size, pose.yaw(), self.class)?.with_object_id(self.object_id))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    /// Sweeps into the past; 0 is the keyframe.
    pub k: u32,
    /// Ego pose in the world frame at this sweep.
    pub ego_pose: RigidTransform,
    /// Points in this sweep's ego frame.
    pub points: Vec<Vec3>,
    /// Object each point was sampled from; `None` for background.
    pub source_ids: Vec<Option<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    /// Oldest sweep first.
    pub sweeps: Vec<SweepRecord>,
    pub trajectories: Vec<ObjectTrajectory>,
    /// Keyframe ground truth, one box per trajectory.
    pub boxes: Vec<Box3D>,
    /// Generator settings, when the sample came from the simulator.
    pub config: Option<ScenarioConfig>,
    /// Accumulated global scale applied by augmentation; length thresholds
    /// such as the dynamic-object threshold are multiplied by it.
    pub metric_scale: f64,
}

impl SequenceSample {
    pub fn num_points(&self) -> usize {
        self.sweeps.iter().map(|s| s.points.len()).sum()
    }

    pub fn max_k(&self) -> u32 {
        self.sweeps.iter().map(|s| s.k).max().unwrap_or(0)
    }

    pub fn sweep(&self, k: u32) -> Option<&SweepRecord> {
        self.sweeps.iter().find(|s| s.k == k)
    }

    pub fn trajectory(&self, object_id: u32) -> Option<&ObjectTrajectory> {
        self.trajectories.iter().find(|t| t.object_id == object_id)
    }
}

/// Center and heading after `tau` seconds (negative into the past) under a
/// constant speed and yaw-rate model with the heading along the velocity.
pub fn constant_turn_state(center: Vec3, yaw: f64, speed: f64, yaw_rate: f64, tau: f64) -> (Vec3, f64) {
    let heading = yaw + yaw_rate * tau;
    let offset = if yaw_rate.abs() < 1e-12 {
        Vec3::new(yaw.cos(), yaw.sin(), 0.0) * (speed * tau)
    } else {
        let r = speed / yaw_rate;
        Vec3::new(r * (heading.sin() - yaw.sin()), r * (yaw.cos() - heading.cos()), 0.0)
    };
    (center + offset, heading)
}

struct ObjectMotion {
    class: ObjectClass,
    size: [f64; 3],
    center: Vec3,
    yaw: f64,
    speed: f64,
    yaw_rate: f64,
}

/// Generates a sequence. Deterministic for a fixed configuration.
pub fn generate_sequence(config: &ScenarioConfig) -> Result<SequenceSample> {
    config.validate()?;
    let n_objects = config.num_objects + config.scripted_objects.len();
    if n_objects == 0 && config.background_points_per_sweep == 0 {
        return Err(Error::EmptyScene);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let big_k = config.num_sweeps - 1;
    let dt = config.sweep_period;

    let motions = place_objects(config, &mut rng);

    let ego_poses: Vec<RigidTransform> = (0..=big_k)
        .map(|k| {
            let (c, yaw) =
                constant_turn_state(Vec3::zeros(), 0.0, config.ego_speed, config.ego_yaw_rate, -(k as f64) * dt);
            if k == 0 {
                RigidTransform::identity()
            } else {
                RigidTransform::from_yaw(yaw, c)
            }
        })
        .collect();

    let mut trajectories = Vec::with_capacity(motions.len());
    let mut body_samples = Vec::with_capacity(motions.len());
    for (id, m) in motions.iter().enumerate() {
        let poses = (0..=big_k)
            .rev()
            .map(|k| {
                let (c, yaw) = constant_turn_state(m.center, m.yaw, m.speed, m.yaw_rate, -(k as f64) * dt);
                RigidTransform::from_yaw(yaw, c)
            })
            .collect();
        trajectories.push(ObjectTrajectory {
            object_id: id as u32,
            class: m.class,
            size: m.size,
            poses,
        });
        body_samples.push(surface_samples(m.size, config.points_per_object_per_sweep, &mut rng));
    }

    let r = config.xy_range;
    let background: Vec<Vec3> = (0..config.background_points_per_sweep)
        .map(|_| Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), config.ground_z))
        .collect();

    let noise = if config.noise_sigma > 0.0 {
        Some(Normal::new(0.0, config.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };

    let mut sweeps = Vec::with_capacity(config.num_sweeps);
    for k in (0..=big_k).rev() {
        let ego = ego_poses[k];
        let to_ego = ego.inverse();
        let mut points = Vec::new();
        let mut source_ids = Vec::new();
        for (traj, samples) in trajectories.iter().zip(&body_samples) {
            let to_sensor = to_ego.compose(traj.pose(k)?);
            for b in samples {
                points.push(to_sensor.apply(b));
                source_ids.push(Some(traj.object_id));
            }
        }
        for w in &background {
            points.push(to_ego.apply(w));
            source_ids.push(None);
        }
        if let Some(dist) = &noise {
            for p in &mut points {
                *p += Vec3::new(dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng));
            }
        }
        sweeps.push(SweepRecord {
            k: k as u32,
            ego_pose: ego,
            points,
            source_ids,
        });
    }

    let boxes = trajectories.iter().map(|t| t.box_at(0)).collect::<Result<Vec<_>>>()?;
    Ok(SequenceSample {
        sweeps,
        trajectories,
        boxes,
        config: Some(config.clone()),
        metric_scale: 1.0,
    })
}

fn place_objects(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<ObjectMotion> {
    let ground = config.ground_z;
    let mut motions: Vec<ObjectMotion> = config
        .scripted_objects
        .iter()
        .map(|s| {
            let size = s.size.unwrap_or_else(|| nominal_size(s.class));
            ObjectMotion {
                class: s.class,
                size,
                center: Vec3::new(s.center[0], s.center[1], ground + 0.5 * size[2]),
                yaw: s.yaw,
                speed: s.speed,
                yaw_rate: s.yaw_rate,
            }
        })
        .collect();
    let mut placed_boxes: Vec<Box3D> = motions.iter().filter_map(keyframe_box).collect();

    for _ in 0..config.num_objects {
        let class = config.classes[rng.random_range(0..config.classes.len())];
        let nominal = nominal_size(class);
        let jitter: f64 = rng.random_range(0.9..1.1);
        let size = nominal.map(|s| s * jitter);
        let parked = rng.random_bool(config.static_object_fraction);
        let (speed, yaw_rate) = if parked {
            (0.0, 0.0)
        } else {
            (
                sample_range(rng, config.object_speed),
                sample_range(rng, config.object_yaw_rate),
            )
        };
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let half = config.xy_range - config.placement_margin(speed, size[0].max(size[1]));
        for _attempt in 0..100 {
            let center = Vec3::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                ground + 0.5 * size[2],
            );
            let m = ObjectMotion {
                class,
                size,
                center,
                yaw,
                speed,
                yaw_rate,
            };
            let Some(b) = keyframe_box(&m) else { continue };
            let clear = placed_boxes
                .iter()
                .all(|other| bev_iou(&b, other).map(|iou| iou == 0.0).unwrap_or(false));
            if clear {
                placed_boxes.push(b);
                motions.push(m);
                break;
            }
        }
    }
    if motions.len() < config.num_objects + config.scripted_objects.len() {
        log::warn!(
            "placed {} of {} objects without overlap",
            motions.len(),
            config.num_objects + config.scripted_objects.len()
        );
    }
    motions
}

fn keyframe_box(m: &ObjectMotion) -> Option<Box3D> {
    Box3D::new(m.center, m.size, m.yaw, m.class).ok()
}

fn sample_range(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Body-frame samples on the cuboid surface: the eight corners first, then
/// area-weighted uniform samples over the faces.
pub fn surface_samples(size: [f64; 3], n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let h = [0.5 * size[0], 0.5 * size[1], 0.5 * size[2]];
    let mut out = Vec::with_capacity(n);
    for i in 0..8.min(n) {
        let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
        let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
        let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
        out.push(Vec3::new(sx * h[0], sy * h[1], sz * h[2]));
    }
    // Faces come in pairs normal to x, y, z.
    let areas = [size[1] * size[2], size[0] * size[2], size[0] * size[1]];
    let total: f64 = areas.iter().sum();
    while out.len() < n {
        let u = rng.random_range(0.0..total);
        let axis = if u < areas[0] {
            0
        } else if u < areas[0] + areas[1] {
            1
        } else {
            2
        };
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut p = Vec3::zeros();
        for i in 0..3 {
            p[i] = if i == axis {
                sign * h[i]
            } else {
                rng.random_range(-h[i]..=h[i])
            };
        }
        out.push(p);
    }
    out
}
