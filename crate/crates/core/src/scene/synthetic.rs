//! Declarative scene builder for fixtures and tests.
//!
//! Objects are placed directly in the camera frame of a named camera, so their
//! projections are known in closed form.

use std::collections::BTreeMap;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{
    Box3D, CameraCalibration, CameraView, LidarPoint, ObjectAnnotation, Pose, SceneError,
    SceneSample,
};
use crate::geometry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCamera {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Rotation of a level, forward-looking camera about the ego z axis
    /// (counter-clockwise, degrees). `None` mounts the camera with an identity
    /// rotation, i.e. the ego frame coincides with the camera frame.
    #[serde(default = "default_mount")]
    pub mount_yaw_deg: Option<f64>,
    #[serde(default)]
    pub mount_translation: [f64; 3],
}

fn default_mount() -> Option<f64> {
    Some(0.0)
}

impl SyntheticCamera {
    /// 1600x900 front camera with `f = 500`, principal point at the image center.
    pub fn front(name: &str) -> Self {
        Self {
            name: name.to_string(),
            fx: 500.0,
            fy: 500.0,
            cx: 800.0,
            cy: 450.0,
            width: 1600,
            height: 900,
            mount_yaw_deg: Some(0.0),
            mount_translation: [0.0; 3],
        }
    }

    fn extrinsic(&self) -> Pose {
        let rotation = match self.mount_yaw_deg {
            None => UnitQuaternion::identity(),
            Some(deg) => {
                // camera x -> ego -y, camera y -> ego -z, camera z -> ego +x
                let level = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::new(
                    0.0, 0.0, 1.0, //
                    -1.0, 0.0, 0.0, //
                    0.0, -1.0, 0.0,
                ));
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), deg.to_radians())
                    * UnitQuaternion::from_rotation_matrix(&level)
            }
        };
        let q = rotation.quaternion();
        let mut pose = Pose { translation: self.mount_translation, rotation: [q.w, q.i, q.j, q.k] };
        // renormalize away accumulated rounding
        pose = Pose::normalized(pose.translation, pose.rotation).expect("unit rotation");
        pose
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticObject {
    pub id: String,
    pub category: String,
    /// Camera whose frame `position` is expressed in.
    pub camera: String,
    /// Box center in camera coordinates (x right, y down, z forward), meters.
    pub position: [f64; 3],
    /// `(width, length, height)`, meters.
    #[serde(default = "default_size")]
    pub size: [f64; 3],
    /// Heading seen from above, clockwise from the optical axis, degrees.
    #[serde(default)]
    pub heading_deg: f64,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub require_visible: bool,
    /// Lidar returns generated inside the box, labeled with `category`.
    #[serde(default)]
    pub lidar_points: usize,
}

fn default_size() -> [f64; 3] {
    [2.0, 2.0, 2.0]
}

impl SyntheticObject {
    pub fn new(id: &str, category: &str, camera: &str, position: [f64; 3]) -> Self {
        Self {
            id: id.to_string(),
            category: category.to_string(),
            camera: camera.to_string(),
            position,
            size: default_size(),
            heading_deg: 0.0,
            description: None,
            require_visible: false,
            lidar_points: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub sample_id: String,
    #[serde(default = "Pose::identity")]
    pub ego_pose: Pose,
    pub cameras: Vec<SyntheticCamera>,
    #[serde(default)]
    pub objects: Vec<SyntheticObject>,
    /// Extra lidar points, global frame.
    #[serde(default)]
    pub extra_lidar: Vec<LidarPoint>,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            sample_id: String::new(),
            ego_pose: Pose::identity(),
            cameras: Vec::new(),
            objects: Vec::new(),
            extra_lidar: Vec::new(),
        }
    }
}

/// Deterministic fractions in `(0, 1)` for the `i`-th of `n` samples.
fn lattice(i: usize, n: usize) -> [f64; 3] {
    // Additive recurrence on the plastic number; well spread for any n.
    const A: [f64; 3] = [0.754_877_666_246_692_7, 0.569_840_290_998_053_3, 0.5];
    let t = (i as f64 + 0.5) / n as f64;
    [
        (0.5 + A[0] * i as f64).fract() * 0.9 + 0.05,
        (0.5 + A[1] * i as f64).fract() * 0.9 + 0.05,
        t * 0.9 + 0.05,
    ]
}

pub fn build_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<SceneSample, SceneError> {
    Pose::new(spec.ego_pose.translation, spec.ego_pose.rotation)?;
    let ego = spec.ego_pose;
    let mut cameras = BTreeMap::new();
    for cam in &spec.cameras {
        let calibration = CameraCalibration::new(
            cam.fx,
            cam.fy,
            cam.cx,
            cam.cy,
            cam.extrinsic(),
            cam.width,
            cam.height,
        )?;
        cameras.insert(
            cam.name.clone(),
            CameraView { calibration, image: format!("{}/{}.jpg", spec.sample_id, cam.name) },
        );
    }

    let mut objects = Vec::with_capacity(spec.objects.len());
    let mut lidar = spec.extra_lidar.clone();
    for obj in &spec.objects {
        let view = cameras.get(&obj.camera).ok_or_else(|| {
            SceneError::InvalidCalibration(format!(
                "object `{}` references unknown camera `{}`",
                obj.id, obj.camera
            ))
        })?;
        let calib = &view.calibration;
        let center = geometry::camera_to_global(&obj.position.into(), &ego, calib);
        let h = obj.heading_deg.to_radians();
        let dir_cam = Vector3::new(h.sin(), 0.0, h.cos());
        let dir_global = ego.unit_quaternion() * (calib.extrinsic.unit_quaternion() * dir_cam);
        let yaw = dir_global.y.atan2(dir_global.x);
        let box3d = Box3D::new([center.x, center.y, center.z], obj.size, yaw)?;

        if obj.require_visible && geometry::project_box3d(&box3d, &ego, calib).is_none() {
            return Err(SceneError::NotVisible(obj.id.clone()));
        }

        let [w, l, hgt] = obj.size;
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), box3d.yaw);
        for i in 0..obj.lidar_points {
            let f = lattice(i, obj.lidar_points);
            let local = Vector3::new((f[0] - 0.5) * l, (f[1] - 0.5) * w, (f[2] - 0.5) * hgt);
            let p = box3d.center_vec() + rot * local;
            lidar.push(LidarPoint { position: [p.x, p.y, p.z], semantic_class: obj.category.clone() });
        }

        objects.push(ObjectAnnotation {
            id: obj.id.clone(),
            category: obj.category.clone(),
            box3d,
            description: obj.description.clone(),
        });
    }

    let scene = SceneSample {
        sample_id: spec.sample_id.clone(),
        ego_pose: ego,
        cameras,
        objects,
        lidar,
    };
    scene.validate()?;
    Ok(scene)
}

/// (category, size `[w, l, h]`, caption pool)
const PALETTE: &[(&str, [f64; 3], &[&str])] = &[
    ("vehicle.car", [1.9, 4.5, 1.6], &["white car", "black sedan", "silver suv", "red car", "blue hatchback"]),
    ("vehicle.truck", [2.5, 7.0, 3.0], &["white truck", "gray pickup", "red truck"]),
    ("vehicle.bus.rigid", [2.9, 11.0, 3.3], &["yellow bus", "white and blue bus"]),
    ("vehicle.motorcycle", [0.8, 2.1, 1.4], &["black motorcycle", "red motorcycle"]),
    (
        "human.pedestrian.adult",
        [0.7, 0.7, 1.75],
        &["man wearing a black jacket", "woman in a red coat and blue jeans", "adult with a green shirt"],
    ),
    ("movable_object.barrier", [2.5, 0.5, 1.0], &["orange barrier", "white barrier"]),
    ("movable_object.trafficcone", [0.4, 0.4, 0.7], &["orange cone", "white and orange cone"]),
];

/// Seeded random scene: two level cameras (front, and front-left yawed 55°),
/// one to six objects in front of them, a random ego pose. Some objects are
/// deliberately hard: few lidar returns, vague captions, repeated classes,
/// overlapping boxes.
pub fn random_scene_spec(seed: u64, index: usize) -> SyntheticSceneSpec {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let yaw: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
    let ego = Pose::normalized(
        [rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0), 0.0],
        [q.w, q.i, q.j, q.k],
    )
    .expect("unit rotation");
    let mut front = SyntheticCamera::front("CAM_FRONT");
    front.mount_translation = [1.7, 0.0, 1.5];
    let mut left = SyntheticCamera::front("CAM_FRONT_LEFT");
    left.mount_yaw_deg = Some(55.0);
    left.mount_translation = [1.5, 0.5, 1.5];
    let cameras = vec![front, left];

    let n = rng.gen_range(1..=6);
    let mut used: Vec<usize> = Vec::new();
    let mut objects = Vec::with_capacity(n);
    for k in 0..n {
        let cat = if !used.is_empty() && rng.gen_bool(0.1) {
            used[rng.gen_range(0..used.len())]
        } else {
            let free: Vec<usize> = (0..PALETTE.len()).filter(|c| !used.contains(c)).collect();
            if free.is_empty() {
                rng.gen_range(0..PALETTE.len())
            } else {
                free[rng.gen_range(0..free.len())]
            }
        };
        used.push(cat);
        let (category, size, captions) = PALETTE[cat];
        let cam = &cameras[rng.gen_range(0..cameras.len())].name;
        let z: f64 = rng.gen_range(3.0..45.0);
        let x: f64 = rng.gen_range(-0.9..0.9) * z;
        let mut o = SyntheticObject::new(&format!("{index}-obj{k}"), category, cam, [x, 1.5 - size[2] / 2.0, z]);
        o.size = size;
        o.heading_deg = rng.gen_range(0.0..360.0);
        o.lidar_points = if rng.gen_bool(0.15) { rng.gen_range(0..10) } else { rng.gen_range(10..60) };
        o.description = if rng.gen_bool(0.1) {
            Some("something hard to make out".to_string())
        } else {
            Some(captions[rng.gen_range(0..captions.len())].to_string())
        };
        objects.push(o);
    }
    SyntheticSceneSpec { sample_id: format!("rand-{seed}-{index:05}"), ego_pose: ego, cameras, objects, extra_lidar: vec![] }
}

pub fn random_scenes(count: usize, seed: u64) -> Vec<SceneSample> {
    (0..count)
        .map(|i| build_synthetic_scene(&random_scene_spec(seed, i)).expect("random specs are valid"))
        .collect()
}
