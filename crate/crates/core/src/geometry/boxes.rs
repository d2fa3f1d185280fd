//! Yaw-only oriented cuboids and their overlap measures.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::transform::{normalize_angle, RigidTransform, Vec3};
use crate::error::{Error, Result};

/// Intersection areas below this are treated as empty.
const AREA_EPS: f64 = 1e-12;

/// Slack on the inclusive containment test so that points generated exactly
/// on a face survive the round trip through world and sensor frames.
pub const CONTAINMENT_EPS: f64 = 1e-9;

pub type Vec2 = Vector2<f64>;

/// Detection classes, in the order used by the evaluation tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Truck,
    ConstructionVehicle,
    Bus,
    Trailer,
    Barrier,
    Motorcycle,
    Bicycle,
    Pedestrian,
    TrafficCone,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 10] = [
        ObjectClass::Car,
        ObjectClass::Truck,
        ObjectClass::ConstructionVehicle,
        ObjectClass::Bus,
        ObjectClass::Trailer,
        ObjectClass::Barrier,
        ObjectClass::Motorcycle,
        ObjectClass::Bicycle,
        ObjectClass::Pedestrian,
        ObjectClass::TrafficCone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::ConstructionVehicle => "construction_vehicle",
            ObjectClass::Bus => "bus",
            ObjectClass::Trailer => "trailer",
            ObjectClass::Barrier => "barrier",
            ObjectClass::Motorcycle => "motorcycle",
            ObjectClass::Bicycle => "bicycle",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::TrafficCone => "traffic_cone",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

/// Oriented cuboid. `center` is the geometric center; `size` is
/// `(length, width, height)` with length along the heading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: ObjectClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Box3D {
    pub fn new(center: Vec3, size: [f64; 3], yaw: f64, class: ObjectClass) -> Result<Self> {
        let b = Self {
            center,
            size,
            yaw: normalize_angle(yaw),
            class,
            object_id: None,
            score: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_object_id(mut self, id: u32) -> Self {
        self.object_id = Some(id);
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn length(&self) -> f64 {
        self.size[0]
    }

    pub fn width(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// Pose of the box body frame in the frame the box is expressed in.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::from_yaw(self.yaw, self.center)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("box size {:?} must be positive", self.size)));
        }
        if !(self.center.iter().all(|c| c.is_finite()) && self.yaw.is_finite()) {
            return Err(Error::invalid("non-finite box pose"));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::invalid(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [Vec2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.size[0], 0.5 * self.size[1]);
        let local = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
        local.map(|(x, y)| Vec2::new(self.center.x + c * x - s * y, self.center.y + s * x + c * y))
    }

    fn z_span(&self) -> (f64, f64) {
        let hh = 0.5 * self.size[2];
        (self.center.z - hh, self.center.z + hh)
    }
}

/// Area of the intersection of the two BEV rectangles.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let clipped = clip_convex(&a.bev_corners(), &b.bev_corners());
    let area = polygon_area(&clipped);
    Ok(if area < AREA_EPS { 0.0 } else { area })
}

/// Intersection over union of the yaw-rotated BEV rectangles.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64> {
    let inter = bev_intersection_area(a, b)?;
    let union = a.length() * a.width() + b.length() * b.width() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Volumetric IoU computed as BEV intersection area times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    let inter_area = bev_intersection_area(a, b)?;
    let (a0, a1) = a.z_span();
    let (b0, b1) = b.z_span();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    let inter = inter_area * dz;
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Inclusive containment mask of `points` in the oriented cuboid.
pub fn points_in_box(b: &Box3D, points: &[Vec3]) -> Vec<bool> {
    let to_body = b.pose().inverse();
    let half = [0.5 * b.size[0], 0.5 * b.size[1], 0.5 * b.size[2]];
    points
        .iter()
        .map(|p| {
            let q = to_body.apply(p);
            (0..3).all(|i| q[i].abs() <= half[i] + CONTAINMENT_EPS)
        })
        .collect()
}

/// Sutherland–Hodgman clipping of `subject` against the convex,
/// counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut output: Vec<Vec2> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % clip.len()];
        let edge = e1 - e0;
        let side = |p: &Vec2| edge.perp(&(p - e0));
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(&cur), side(&prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: Vec2, q: Vec2, sp: f64, sq: f64) -> Vec2 {
    let t = sp / (sp - sq);
    p + (q - p) * t
}

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[Vec2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let twice: f64 = (0..poly.len())
        .map(|i| poly[i].perp(&poly[(i + 1) % poly.len()]))
        .sum();
    0.5 * twice.abs()
}
