//! Camera transforms, projection, box overlap measures and the spatial ground
//! truth quantities (heading, depth, lateral offset).
//!
//! Camera frame convention: x right, y down, z forward along the optical axis.
//! Pixel coordinates have their origin at the top-left image corner.

use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{BBox2D, Box3D, CameraCalibration, Pose};

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraFramePoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<Vector3<f64>> for CameraFramePoint {
    fn from(v: Vector3<f64>) -> Self {
        Self { x: v.x, y: v.y, z: v.z }
    }
}

impl From<[f64; 3]> for CameraFramePoint {
    fn from(v: [f64; 3]) -> Self {
        Self { x: v[0], y: v[1], z: v[2] }
    }
}

impl From<CameraFramePoint> for Vector3<f64> {
    fn from(p: CameraFramePoint) -> Self {
        Vector3::new(p.x, p.y, p.z)
    }
}

pub fn global_to_camera(p: &Vector3<f64>, ego: &Pose, calib: &CameraCalibration) -> CameraFramePoint {
    let in_ego = ego.inverse_transform_point(p);
    calib.extrinsic.inverse_transform_point(&in_ego).into()
}

pub fn camera_to_global(p: &CameraFramePoint, ego: &Pose, calib: &CameraCalibration) -> Vector3<f64> {
    let in_ego = calib.extrinsic.transform_point(&Vector3::from(*p));
    ego.transform_point(&in_ego)
}

pub fn project_point(p: &CameraFramePoint, calib: &CameraCalibration) -> Result<(f64, f64), GeometryError> {
    if p.z <= 0.0 {
        return Err(GeometryError::BehindCamera(p.z));
    }
    let k = &calib.intrinsics;
    let (xn, yn) = (p.x / p.z, p.y / p.z);
    Ok((k[0][0] * xn + k[0][1] * yn + k[0][2], k[1][1] * yn + k[1][2]))
}

/// Axis-aligned hull of the projected box corners, not clipped to the image.
///
/// Corners with `z <= 0` are dropped; fewer than two surviving corners means
/// not visible.
pub fn project_box3d_hull(box3d: &Box3D, ego: &Pose, calib: &CameraCalibration) -> Option<BBox2D> {
    let pixels: Vec<(f64, f64)> = box3d
        .corners()
        .iter()
        .filter_map(|c| project_point(&global_to_camera(c, ego, calib), calib).ok())
        .collect();
    if pixels.len() < 2 {
        return None;
    }
    let (mut xmin, mut ymin) = (f64::INFINITY, f64::INFINITY);
    let (mut xmax, mut ymax) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (u, v) in pixels {
        xmin = xmin.min(u);
        ymin = ymin.min(v);
        xmax = xmax.max(u);
        ymax = ymax.max(v);
    }
    BBox2D::new(xmin, ymin, xmax, ymax).ok()
}

/// Projected hull clipped to the image. `None` when not visible or when the
/// clipped box has zero area.
pub fn project_box3d(box3d: &Box3D, ego: &Pose, calib: &CameraCalibration) -> Option<BBox2D> {
    project_box3d_hull(box3d, ego, calib)?.clip(calib.width(), calib.height())
}

pub fn intersection_area(a: &BBox2D, b: &BBox2D) -> f64 {
    let w = a.xmax().min(b.xmax()) - a.xmin().max(b.xmin());
    let h = a.ymax().min(b.ymax()) - a.ymin().max(b.ymin());
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// `|A ∩ B| / min(|A|, |B|)`.
pub fn overlap_ratio(a: &BBox2D, b: &BBox2D) -> f64 {
    let inter = intersection_area(a, b);
    (inter / a.area().min(b.area())).clamp(0.0, 1.0)
}

pub fn iou(a: &BBox2D, b: &BBox2D) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// FCOS-style centerness of pixel `(u, v)` inside `gt`; zero outside.
pub fn centerness(u: f64, v: f64, gt: &BBox2D) -> f64 {
    if !(u.is_finite() && v.is_finite()) || !gt.contains(u, v) {
        return 0.0;
    }
    let l = u - gt.xmin();
    let r = gt.xmax() - u;
    let t = v - gt.ymin();
    let b = gt.ymax() - v;
    let lr = l.min(r) / l.max(r);
    let tb = t.min(b) / t.max(b);
    (lr * tb).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CompassDirection {
    North,
    East,
    South,
    West,
}

impl CompassDirection {
    pub const ALL: [CompassDirection; 4] = [Self::North, Self::East, Self::South, Self::West];

    fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    fn index(self) -> usize {
        self as usize
    }

    /// 180° relabeling: N <-> S, E <-> W.
    pub fn opposite(self) -> Self {
        Self::from_index(self.index() + 2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::North => "North",
            Self::East => "East",
            Self::South => "South",
            Self::West => "West",
        }
    }
}

impl fmt::Display for CompassDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Direction the camera's optical axis is assumed to point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraFacing {
    North,
    South,
}

impl CameraFacing {
    pub fn as_direction(self) -> CompassDirection {
        match self {
            Self::North => CompassDirection::North,
            Self::South => CompassDirection::South,
        }
    }

    pub fn as_lowercase(self) -> &'static str {
        match self {
            Self::North => "north",
            Self::South => "south",
        }
    }
}

/// Object heading seen from above, measured clockwise from the optical axis,
/// degrees in `[0, 360)`. Uses the ground-plane heading of the box.
pub fn relative_heading_deg(box3d: &Box3D, ego: &Pose, calib: &CameraCalibration) -> f64 {
    let rot = ego.unit_quaternion() * calib.extrinsic.unit_quaternion();
    let d = rot.inverse() * box3d.heading();
    let deg = d.x.atan2(d.z).to_degrees();
    // snap away sub-nanodegree noise so boundary headings land deterministically
    let snapped = (deg * 1e9).round() / 1e9;
    snapped.rem_euclid(360.0)
}

/// Maps a clockwise relative heading onto a cardinal label. Sectors are 90°
/// wide and centered on the cardinals; a heading exactly on a boundary
/// belongs to the clockwise-adjacent sector.
pub fn compass_from_relative_heading(heading_deg: f64, facing: CameraFacing) -> CompassDirection {
    let h = heading_deg.rem_euclid(360.0);
    let sector = (((h + 45.0) / 90.0).floor() as usize) % 4;
    CompassDirection::from_index(sector + facing.as_direction().index())
}

pub fn compass_direction(
    box3d: &Box3D,
    ego: &Pose,
    calib: &CameraCalibration,
    facing: CameraFacing,
) -> CompassDirection {
    compass_from_relative_heading(relative_heading_deg(box3d, ego, calib), facing)
}

/// How "distance from the camera" is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Camera-frame z of the box center.
    #[default]
    OpticalAxis,
    /// Euclidean distance from the camera center.
    Euclidean,
}

pub fn camera_depth(box3d: &Box3D, ego: &Pose, calib: &CameraCalibration) -> Result<f64, GeometryError> {
    object_distance(box3d, ego, calib, DepthMode::OpticalAxis)
}

pub fn object_distance(
    box3d: &Box3D,
    ego: &Pose,
    calib: &CameraCalibration,
    mode: DepthMode,
) -> Result<f64, GeometryError> {
    let p = global_to_camera(&box3d.center_vec(), ego, calib);
    if p.z <= 0.0 {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok(match mode {
        DepthMode::OpticalAxis => p.z,
        DepthMode::Euclidean => Vector3::from(p).norm(),
    })
}

/// Signed camera-frame x of the box center; negative is left of the optical axis.
pub fn lateral_offset(box3d: &Box3D, ego: &Pose, calib: &CameraCalibration) -> f64 {
    global_to_camera(&box3d.center_vec(), ego, calib).x
}
