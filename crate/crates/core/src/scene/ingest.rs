//! Reader for nuScenes-style annotation dumps.
//!
//! The input is a single JSON document holding one record per sample with its
//! camera calibrations, box annotations and lidarseg points already joined.
//! See `docs/formats.md` for the field list.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    is_known_category, Box3D, CameraCalibration, CameraView, LidarPoint, ObjectAnnotation, Pose,
    SceneError, SceneSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split `{other}` (expected train or val)")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read annotation file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation in {record}: {message}")]
    Schema { record: String, message: String },
    #[error("unknown category label `{label}` in {record}")]
    UnknownCategory { record: String, label: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub samples: usize,
    pub objects: usize,
    pub lidar_points: usize,
    pub skipped_non_keyframes: usize,
    pub skipped_other_split: usize,
}

#[derive(Deserialize)]
struct RawDump {
    #[serde(default)]
    samples: Vec<serde_json::Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    token: String,
    split: Split,
    #[serde(default = "default_true")]
    is_key_frame: bool,
    ego_pose: RawPose,
    cameras: Vec<RawCamera>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
    #[serde(default)]
    lidarseg: Vec<RawLidarPoint>,
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
struct RawPose {
    translation: [f64; 3],
    rotation: [f64; 4],
}

#[derive(Deserialize)]
struct RawCamera {
    channel: String,
    filename: String,
    width: u32,
    height: u32,
    calibrated_sensor: RawSensor,
}

#[derive(Deserialize)]
struct RawSensor {
    translation: [f64; 3],
    rotation: [f64; 4],
    camera_intrinsic: [[f64; 3]; 3],
}

#[derive(Deserialize)]
struct RawAnnotation {
    token: String,
    category_name: String,
    translation: [f64; 3],
    size: [f64; 3],
    rotation: [f64; 4],
    #[serde(default)]
    description: Option<String>,
}

#[derive(Deserialize)]
struct RawLidarPoint {
    translation: [f64; 3],
    category_name: String,
}

/// Heading about +z of a `[w, x, y, z]` quaternion.
fn quaternion_yaw(q: [f64; 4]) -> f64 {
    let [w, x, y, z] = q;
    (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
}

fn schema(record: impl Into<String>, e: impl std::fmt::Display) -> IngestError {
    IngestError::Schema { record: record.into(), message: e.to_string() }
}

/// Reads every keyframe of `split` from the annotation dump at `path`.
pub fn ingest_annotations(
    path: &Path,
    split: Split,
) -> Result<(Vec<SceneSample>, IngestReport), IngestError> {
    let text = fs::read_to_string(path)
        .map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
    let mut report = IngestReport::default();
    if text.trim().is_empty() {
        return Ok((Vec::new(), report));
    }
    let dump: RawDump = serde_json::from_str(&text).map_err(|e| schema("document", e))?;

    let mut scenes = Vec::new();
    for (idx, value) in dump.samples.into_iter().enumerate() {
        let label = value
            .get("token")
            .and_then(|t| t.as_str())
            .map(|t| format!("sample `{t}`"))
            .unwrap_or_else(|| format!("samples[{idx}]"));
        let raw: RawSample = serde_json::from_value(value).map_err(|e| schema(&label, e))?;
        if raw.split != split {
            report.skipped_other_split += 1;
            continue;
        }
        if !raw.is_key_frame {
            report.skipped_non_keyframes += 1;
            continue;
        }
        let scene = convert_sample(raw, &label)?;
        report.samples += 1;
        report.objects += scene.objects.len();
        report.lidar_points += scene.lidar.len();
        scenes.push(scene);
    }
    tracing::info!(
        samples = report.samples,
        objects = report.objects,
        "ingested annotation dump"
    );
    Ok((scenes, report))
}

fn convert_sample(raw: RawSample, label: &str) -> Result<SceneSample, IngestError> {
    let ego_pose = Pose::normalized(raw.ego_pose.translation, raw.ego_pose.rotation)
        .map_err(|e| schema(format!("{label} ego_pose"), e))?;

    let mut cameras = BTreeMap::new();
    for cam in raw.cameras {
        let record = format!("{label} camera `{}`", cam.channel);
        let extrinsic =
            Pose::normalized(cam.calibrated_sensor.translation, cam.calibrated_sensor.rotation)
                .map_err(|e| schema(&record, e))?;
        let calibration = CameraCalibration {
            intrinsics: cam.calibrated_sensor.camera_intrinsic,
            extrinsic,
            image_width: cam.width,
            image_height: cam.height,
        };
        calibration.validate().map_err(|e| schema(&record, e))?;
        if cameras
            .insert(cam.channel.clone(), CameraView { calibration, image: cam.filename })
            .is_some()
        {
            return Err(schema(record, "duplicate camera channel"));
        }
    }

    let mut objects = Vec::with_capacity(raw.annotations.len());
    for ann in raw.annotations {
        let record = format!("annotation `{}` in {label}", ann.token);
        if !is_known_category(&ann.category_name) {
            return Err(IngestError::UnknownCategory { record, label: ann.category_name });
        }
        let box3d = Box3D::new(ann.translation, ann.size, quaternion_yaw(ann.rotation))
            .map_err(|e| schema(&record, e))?;
        if matches!(&ann.description, Some(d) if d.trim().is_empty()) {
            return Err(schema(record, "description must be non-empty when present"));
        }
        objects.push(ObjectAnnotation {
            id: ann.token,
            category: ann.category_name,
            box3d,
            description: ann.description,
        });
    }

    let mut lidar = Vec::with_capacity(raw.lidarseg.len());
    for (i, p) in raw.lidarseg.into_iter().enumerate() {
        if !is_known_category(&p.category_name) {
            return Err(IngestError::UnknownCategory {
                record: format!("lidarseg[{i}] in {label}"),
                label: p.category_name,
            });
        }
        lidar.push(LidarPoint { position: p.translation, semantic_class: p.category_name });
    }

    let scene = SceneSample { sample_id: raw.token, ego_pose, cameras, objects, lidar };
    scene.validate().map_err(|e| match e {
        SceneError::UnknownCategory(l) => {
            IngestError::UnknownCategory { record: label.to_string(), label: l }
        }
        other => schema(label, other),
    })?;
    Ok(scene)
}
