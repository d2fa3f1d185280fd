//! Rigid transforms, oriented boxes and overlap measures.

mod boxes;
mod transform;

pub use boxes::{
    bev_intersection_area, bev_iou, clip_convex, iou_3d, points_in_box, polygon_area, Box3D,
    ObjectClass, Vec2, CONTAINMENT_EPS,
};
pub(crate) use transform::quaternion_from_matrix;
pub use transform::{
    interpolate_pose, normalize_angle, rotation_frobenius_distance, RigidTransform, SevenVector,
    Vec3, UNIT_NORM_TOL,
};
