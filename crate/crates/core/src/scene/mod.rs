//! Domain types for multi-camera driving scenes.
//!
//! Frames used throughout the crate:
//!
//! * **global**: world frame of the dataset, z up.
//! * **ego**: vehicle body frame, x forward, y left, z up.
//! * **camera**: x right, y down, z forward along the optical axis.
//!
//! A [`Pose`] always maps points from its child frame into its parent frame
//! (`ego -> global` for the ego pose, `camera -> ego` for an extrinsic).

mod ingest;
mod synthetic;

pub use ingest::{ingest_annotations, IngestError, IngestReport, Split};
pub use synthetic::{build_synthetic_scene, random_scene_spec, random_scenes, SyntheticCamera, SyntheticObject, SyntheticSceneSpec};

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Isometry3, Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the norm of a stored rotation quaternion.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("rotation quaternion is not unit length (norm {0})")]
    NonUnitQuaternion(f64),
    #[error("invalid camera calibration: {0}")]
    InvalidCalibration(String),
    #[error("invalid 3D box: {0}")]
    InvalidBox(String),
    #[error("invalid 2D box [{0}, {1}, {2}, {3}]")]
    InvalidBBox(f64, f64, f64, f64),
    #[error("duplicate object id `{0}` in sample")]
    DuplicateObjectId(String),
    #[error("unknown category label `{0}`")]
    UnknownCategory(String),
    #[error("object `{0}` is not visible from any camera")]
    NotVisible(String),
}

/// Rigid transform from a child frame into its parent frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Meters.
    pub translation: [f64; 3],
    /// Unit quaternion stored as `[w, x, y, z]`.
    pub rotation: [f64; 4],
}

impl Pose {
    pub fn new(translation: [f64; 3], rotation: [f64; 4]) -> Result<Self, SceneError> {
        let norm = rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(SceneError::NonUnitQuaternion(norm));
        }
        Ok(Self { translation, rotation })
    }

    /// Builds a pose after renormalizing `rotation`. Used for ingested data where
    /// quaternions are stored with a handful of significant digits.
    pub fn normalized(translation: [f64; 3], rotation: [f64; 4]) -> Result<Self, SceneError> {
        let norm = rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-6 {
            return Err(SceneError::NonUnitQuaternion(norm));
        }
        let r = rotation.map(|c| c / norm);
        Ok(Self { translation, rotation: r })
    }

    pub fn identity() -> Self {
        Self { translation: [0.0; 3], rotation: [1.0, 0.0, 0.0, 0.0] }
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let q = iso.rotation.quaternion();
        let t = iso.translation.vector;
        Self { translation: [t.x, t.y, t.z], rotation: [q.w, q.i, q.j, q.k] }
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z))
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        let [x, y, z] = self.translation;
        Isometry3::from_parts(Translation3::new(x, y, z), self.unit_quaternion())
    }

    /// Maps a point from the child frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.isometry().transform_point(&Point3::from(*p)).coords
    }

    /// Maps a point from the parent frame into the child frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.isometry().inverse_transform_point(&Point3::from(*p)).coords
    }
}

/// Pinhole camera model plus mounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraCalibration {
    /// Row-major `[[fx, s, cx], [0, fy, cy], [0, 0, 1]]`, pixels.
    pub intrinsics: [[f64; 3]; 3],
    /// Camera -> ego.
    pub extrinsic: Pose,
    pub image_width: u32,
    pub image_height: u32,
}

impl CameraCalibration {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsic: Pose,
        image_width: u32,
        image_height: u32,
    ) -> Result<Self, SceneError> {
        let calib = Self {
            intrinsics: [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            extrinsic,
            image_width,
            image_height,
        };
        calib.validate()?;
        Ok(calib)
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[0][0]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[1][1]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[0][2]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[1][2]
    }

    pub fn width(&self) -> f64 {
        f64::from(self.image_width)
    }
    pub fn height(&self) -> f64 {
        f64::from(self.image_height)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidCalibration(m.to_string()));
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx() > 0.0 && self.cx() < self.width()) {
            return bad("cx must lie strictly inside the image");
        }
        if !(self.cy() > 0.0 && self.cy() < self.height()) {
            return bad("cy must lie strictly inside the image");
        }
        Pose::new(self.extrinsic.translation, self.extrinsic.rotation)?;
        Ok(())
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Oriented 3D box in the global frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// `(width, length, height)` in meters; length runs along the heading.
    pub size: [f64; 3],
    /// Heading about the global z axis, counter-clockwise from +x.
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self, SceneError> {
        if center.iter().any(|c| !c.is_finite()) {
            return Err(SceneError::InvalidBox("center is not finite".into()));
        }
        if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(SceneError::InvalidBox(format!(
                "size components must be positive, got {size:?}"
            )));
        }
        if !yaw.is_finite() {
            return Err(SceneError::InvalidBox("yaw is not finite".into()));
        }
        Ok(Self { center, size, yaw: normalize_yaw(yaw) })
    }

    pub fn center_vec(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    /// Eight corners in the global frame.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let [w, l, h] = self.size;
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.yaw);
        let c = self.center_vec();
        let mut out = [Vector3::zeros(); 8];
        let mut i = 0;
        for sx in [-0.5, 0.5] {
            for sy in [-0.5, 0.5] {
                for sz in [-0.5, 0.5] {
                    out[i] = c + rot * Vector3::new(sx * l, sy * w, sz * h);
                    i += 1;
                }
            }
        }
        out
    }

    /// Unit heading vector in the ground plane.
    pub fn heading(&self) -> Vector3<f64> {
        Vector3::new(self.yaw.cos(), self.yaw.sin(), 0.0)
    }
}

/// Coarse grouping used for description standardization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CategoryKind {
    Vehicle,
    Pedestrian,
    Other,
}

/// nuScenes detection and lidarseg class names.
pub const KNOWN_CATEGORIES: &[&str] = &[
    "noise",
    "animal",
    "human.pedestrian.adult",
    "human.pedestrian.child",
    "human.pedestrian.construction_worker",
    "human.pedestrian.personal_mobility",
    "human.pedestrian.police_officer",
    "human.pedestrian.stroller",
    "human.pedestrian.wheelchair",
    "movable_object.barrier",
    "movable_object.debris",
    "movable_object.pushable_pullable",
    "movable_object.trafficcone",
    "static_object.bicycle_rack",
    "vehicle.bicycle",
    "vehicle.bus.bendy",
    "vehicle.bus.rigid",
    "vehicle.car",
    "vehicle.construction",
    "vehicle.emergency.ambulance",
    "vehicle.emergency.police",
    "vehicle.motorcycle",
    "vehicle.trailer",
    "vehicle.truck",
    "flat.driveable_surface",
    "flat.other",
    "flat.sidewalk",
    "flat.terrain",
    "static.manmade",
    "static.other",
    "static.vegetation",
    "vehicle.ego",
];

pub fn is_known_category(label: &str) -> bool {
    KNOWN_CATEGORIES.contains(&label)
}

pub fn category_kind(label: &str) -> CategoryKind {
    if label.starts_with("vehicle.") {
        CategoryKind::Vehicle
    } else if label.starts_with("human.pedestrian.") {
        CategoryKind::Pedestrian
    } else {
        CategoryKind::Other
    }
}

/// Short noun for a category, e.g. `vehicle.bus.rigid` -> `bus`.
pub fn category_noun(label: &str) -> &'static str {
    match label {
        "vehicle.car" => "car",
        "vehicle.truck" => "truck",
        "vehicle.bus.bendy" | "vehicle.bus.rigid" => "bus",
        "vehicle.trailer" => "trailer",
        "vehicle.construction" => "construction vehicle",
        "vehicle.motorcycle" => "motorcycle",
        "vehicle.bicycle" => "bicycle",
        "vehicle.emergency.ambulance" => "ambulance",
        "vehicle.emergency.police" => "police car",
        "human.pedestrian.child" => "child",
        l if l.starts_with("human.pedestrian.") => "adult",
        "movable_object.barrier" => "barrier",
        "movable_object.trafficcone" => "traffic cone",
        "movable_object.pushable_pullable" => "cart",
        "movable_object.debris" => "debris",
        "static_object.bicycle_rack" => "bicycle rack",
        "animal" => "animal",
        _ => "object",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub id: String,
    pub category: String,
    #[serde(rename = "box")]
    pub box3d: Box3D,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl ObjectAnnotation {
    /// Text used to refer to the object in questions.
    pub fn display_name(&self) -> String {
        match &self.description {
            Some(d) => d.clone(),
            None => category_noun(&self.category).to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub position: [f64; 3],
    pub semantic_class: String,
}

/// Calibration plus the image captured by that camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub calibration: CameraCalibration,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub sample_id: String,
    pub ego_pose: Pose,
    pub cameras: BTreeMap<String, CameraView>,
    pub objects: Vec<ObjectAnnotation>,
    #[serde(default)]
    pub lidar: Vec<LidarPoint>,
}

impl SceneSample {
    pub fn validate(&self) -> Result<(), SceneError> {
        let mut seen = std::collections::HashSet::new();
        for o in &self.objects {
            if !seen.insert(o.id.as_str()) {
                return Err(SceneError::DuplicateObjectId(o.id.clone()));
            }
            if !is_known_category(&o.category) {
                return Err(SceneError::UnknownCategory(o.category.clone()));
            }
            if o.box3d.center.iter().any(|c| !c.is_finite()) {
                return Err(SceneError::InvalidBox(format!("object `{}` center not finite", o.id)));
            }
        }
        for view in self.cameras.values() {
            view.calibration.validate()?;
        }
        Ok(())
    }

    pub fn object(&self, id: &str) -> Option<&ObjectAnnotation> {
        self.objects.iter().find(|o| o.id == id)
    }
}

/// Axis-aligned image box, origin top-left, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox2D {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

impl BBox2D {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self, SceneError> {
        let finite = [xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite());
        if !finite || xmin >= xmax || ymin >= ymax {
            return Err(SceneError::InvalidBBox(xmin, ymin, xmax, ymax));
        }
        Ok(Self { xmin, ymin, xmax, ymax })
    }

    pub fn xmin(&self) -> f64 {
        self.xmin
    }
    pub fn ymin(&self) -> f64 {
        self.ymin
    }
    pub fn xmax(&self) -> f64 {
        self.xmax
    }
    pub fn ymax(&self) -> f64 {
        self.ymax
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }
    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    /// Inclusive containment test.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.xmin && u <= self.xmax && v >= self.ymin && v <= self.ymax
    }

    /// Intersection with `[0, width] x [0, height]`; `None` when empty.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        Self::new(
            self.xmin.max(0.0),
            self.ymin.max(0.0),
            self.xmax.min(width),
            self.ymax.min(height),
        )
        .ok()
    }

    /// Coordinates rounded to whole pixels. Degenerate results stay `None`.
    pub fn rounded(&self) -> Option<Self> {
        Self::new(self.xmin.round(), self.ymin.round(), self.xmax.round(), self.ymax.round()).ok()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }
}

impl TryFrom<[f64; 4]> for BBox2D {
    type Error = SceneError;
    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox2D> for [f64; 4] {
    fn from(b: BBox2D) -> Self {
        b.to_array()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_rejects_non_unit_quaternion() {
        assert!(Pose::new([0.0; 3], [1.0, 0.1, 0.0, 0.0]).is_err());
        assert!(Pose::new([0.0; 3], [1.0, 0.0, 0.0, 0.0]).is_ok());
        let p = Pose::normalized([0.0; 3], [2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.rotation, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn yaw_is_wrapped_into_half_open_range() {
        assert!((normalize_yaw(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(-PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(0.5) - 0.5).abs() < 1e-12);
        assert!((normalize_yaw(-0.5) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn box_rejects_nonpositive_size() {
        assert!(Box3D::new([0.0; 3], [-1.0, 1.0, 1.0], 0.0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0).is_err());
        assert!(Box3D::new([f64::NAN, 0.0, 0.0], [1.0; 3], 0.0).is_err());
    }

    #[test]
    fn bbox_invariants() {
        assert!(BBox2D::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox2D::new(0.0, 2.0, 1.0, 1.0).is_err());
        let b = BBox2D::new(-10.0, 5.0, 50.0, 20.0).unwrap();
        let c = b.clip(40.0, 100.0).unwrap();
        assert_eq!(c.to_array(), [0.0, 5.0, 40.0, 20.0]);
        assert!(b.clip(-20.0, 100.0).is_none());
        let json = serde_json::to_string(&b).unwrap();
        assert_eq!(json, "[-10.0,5.0,50.0,20.0]");
        assert!(serde_json::from_str::<BBox2D>("[5.0,0.0,1.0,1.0]").is_err());
    }

    #[test]
    fn calibration_checks_principal_point() {
        let bad = CameraCalibration::new(500.0, 500.0, 0.0, 450.0, Pose::identity(), 1600, 900);
        assert!(bad.is_err());
        let ok = CameraCalibration::new(500.0, 500.0, 800.0, 450.0, Pose::identity(), 1600, 900);
        assert!(ok.is_ok());
    }

    #[test]
    fn duplicate_object_ids_are_rejected() {
        let b = Box3D::new([5.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        let obj = ObjectAnnotation {
            id: "a".into(),
            category: "vehicle.car".into(),
            box3d: b,
            description: None,
        };
        let scene = SceneSample {
            sample_id: "s".into(),
            ego_pose: Pose::identity(),
            cameras: BTreeMap::new(),
            objects: vec![obj.clone(), obj],
            lidar: vec![],
        };
        assert_eq!(scene.validate(), Err(SceneError::DuplicateObjectId("a".into())));
    }
}
