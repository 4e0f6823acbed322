//! Multi-stage object filtering.
//!
//! Stages run in a fixed order on every camera image:
//! occlusion, lidar visibility, edge/size, class uniqueness (drops the whole
//! image), and caption-based description. Each stage's predicate is exposed
//! on its own so it can be re-checked in isolation.

mod describe;

pub use describe::standardize_caption;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatModel, ChatRequest, ClientError, InFlightLimiter};
use crate::geometry::{self, global_to_camera, overlap_ratio, project_point};
use crate::scene::{category_noun, BBox2D, CameraCalibration, LidarPoint, ObjectAnnotation, Pose, SceneSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub occlusion_threshold: f64,
    pub min_lidar_points: usize,
    /// Pixels squared.
    pub min_pixel_area: f64,
    pub require_unique_class: bool,
    /// Standardize an existing description instead of calling the captioner.
    pub use_existing_descriptions: bool,
    pub max_in_flight_captions: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            occlusion_threshold: 0.8,
            min_lidar_points: 10,
            min_pixel_area: 1024.0,
            require_unique_class: true,
            use_existing_descriptions: false,
            max_in_flight_captions: 8,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.occlusion_threshold > 0.0 && self.occlusion_threshold <= 1.0) {
            return Err(FilterError::Config(format!(
                "occlusion_threshold must be in (0, 1], got {}",
                self.occlusion_threshold
            )));
        }
        if self.min_pixel_area.is_nan() || self.min_pixel_area < 0.0 {
            return Err(FilterError::Config("min_pixel_area must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter config: {0}")]
    Config(String),
    #[error("captioner failed on object `{object}`: {source}")]
    Captioner {
        object: String,
        #[source]
        source: ClientError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Occlusion,
    LidarVisibility,
    EdgeAndSize,
    ClassUniqueness,
    Description,
}

impl Stage {
    pub const ORDER: [Stage; 5] =
        [Stage::Occlusion, Stage::LidarVisibility, Stage::EdgeAndSize, Stage::ClassUniqueness, Stage::Description];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: Stage,
    pub input: usize,
    pub removed: usize,
    /// Whole images dropped at this stage.
    pub images_removed: usize,
}

impl StageCount {
    pub fn output(&self) -> usize {
        self.input - self.removed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectRef {
    pub sample_id: String,
    pub camera: String,
    pub object_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub config: FilterConfig,
    pub images: usize,
    pub images_retained: usize,
    pub stages: Vec<StageCount>,
    pub retained: Vec<ObjectRef>,
}

impl FilterReport {
    pub fn retained_count(&self) -> usize {
        self.stages.last().map(StageCount::output).unwrap_or(0)
    }

    /// Stage k input equals stage k-1 output, and the last output matches the
    /// retained list.
    pub fn telescopes(&self) -> bool {
        self.stages.windows(2).all(|w| w[1].input == w[0].output())
            && self.retained_count() == self.retained.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedObject {
    /// Annotation with its standardized description filled in.
    pub object: ObjectAnnotation,
    /// Projected box clipped to the image.
    pub bbox: BBox2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedImage {
    pub sample_id: String,
    pub camera: String,
    pub image: String,
    pub objects: Vec<RetainedObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutput {
    pub images: Vec<RetainedImage>,
    pub report: FilterReport,
}

/// Per-object keep flags for the occlusion stage.
///
/// An object is discarded when some other object overlaps it with ratio above
/// the threshold and is larger (equal areas: the lexicographically larger id
/// is discarded). No retained pair can then exceed the threshold.
pub fn occlusion_keep_mask(items: &[(&str, BBox2D)], threshold: f64) -> Vec<bool> {
    items
        .iter()
        .enumerate()
        .map(|(i, (id_i, a))| {
            !items.iter().enumerate().any(|(j, (id_j, b))| {
                i != j
                    && overlap_ratio(a, b) > threshold
                    && (b.area() > a.area() || (b.area() == a.area() && id_j < id_i))
            })
        })
        .collect()
}

pub fn filter_occlusion(
    objects: &[(ObjectAnnotation, BBox2D)],
    cfg: &FilterConfig,
) -> Vec<(ObjectAnnotation, BBox2D)> {
    let items: Vec<(&str, BBox2D)> = objects.iter().map(|(o, b)| (o.id.as_str(), *b)).collect();
    let keep = occlusion_keep_mask(&items, cfg.occlusion_threshold);
    objects.iter().zip(keep).filter(|(_, k)| *k).map(|(o, _)| o.clone()).collect()
}

/// Lidar returns of the object's class that land inside `bbox`.
pub fn count_lidar_hits(
    object: &ObjectAnnotation,
    bbox: &BBox2D,
    lidar: &[LidarPoint],
    ego: &Pose,
    calib: &CameraCalibration,
) -> usize {
    lidar
        .iter()
        .filter(|p| p.semantic_class == object.category)
        .filter_map(|p| project_point(&global_to_camera(&p.position.into(), ego, calib), calib).ok())
        .filter(|(u, v)| bbox.contains(*u, *v))
        .count()
}

pub fn filter_lidar_visibility(
    object: &ObjectAnnotation,
    bbox: &BBox2D,
    lidar: &[LidarPoint],
    ego: &Pose,
    calib: &CameraCalibration,
    cfg: &FilterConfig,
) -> bool {
    count_lidar_hits(object, bbox, lidar, ego, calib) >= cfg.min_lidar_points
}

/// `hull` is the unclipped projected box. Its center must lie inside the image
/// and its visible (clipped) part must reach the minimum area.
pub fn filter_edge_and_size(_object: &ObjectAnnotation, hull: &BBox2D, calib: &CameraCalibration, cfg: &FilterConfig) -> bool {
    let (u, v) = hull.center();
    let inside = (0.0..=calib.width()).contains(&u) && (0.0..=calib.height()).contains(&v);
    let area = hull.clip(calib.width(), calib.height()).map_or(0.0, |b| b.area());
    inside && area >= cfg.min_pixel_area
}

/// Keep the image iff no category occurs twice.
pub fn filter_class_uniqueness<'a>(objects: impl IntoIterator<Item = &'a ObjectAnnotation>) -> bool {
    let mut seen = std::collections::HashSet::new();
    objects.into_iter().all(|o| seen.insert(o.category.as_str()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DescriptionOutcome {
    Accepted(String),
    Rejected { caption: String },
}

pub fn caption_request(object: &ObjectAnnotation, image: &str, bbox: &BBox2D) -> ChatRequest {
    let noun = category_noun(&object.category);
    let [x0, y0, x1, y1] = bbox.to_array().map(|v| v.round() as i64);
    ChatRequest::user(format!(
        "Describe the {noun} inside the box [{x0}, {y0}, {x1}, {y1}] of this image in one short phrase. \
         For a vehicle give only its color(s) and type; for a person describe the clothing."
    ))
    .with_image(image)
}

pub fn describe_and_standardize(
    object: &ObjectAnnotation,
    image: &str,
    bbox: &BBox2D,
    captioner: &dyn ChatModel,
) -> Result<DescriptionOutcome, ClientError> {
    let caption = captioner.complete(&caption_request(object, image, bbox))?.text;
    Ok(match standardize_caption(&caption, &object.category) {
        Some(d) => DescriptionOutcome::Accepted(d),
        None => DescriptionOutcome::Rejected { caption },
    })
}

struct Candidate {
    object: ObjectAnnotation,
    hull: BBox2D,
    bbox: BBox2D,
}

struct ImageWork {
    sample_id: String,
    camera: String,
    image: String,
    candidates: Vec<Candidate>,
}

/// Survivors of the four label-based stages for one image, plus per-stage removals.
fn label_stages(
    work: &ImageWork,
    scene: &SceneSample,
    calib: &CameraCalibration,
    cfg: &FilterConfig,
) -> (Vec<usize>, [usize; 4]) {
    let mut removed = [0usize; 4];
    let items: Vec<(&str, BBox2D)> = work.candidates.iter().map(|c| (c.object.id.as_str(), c.bbox)).collect();
    let mask = occlusion_keep_mask(&items, cfg.occlusion_threshold);
    let mut alive: Vec<usize> = (0..work.candidates.len()).filter(|&i| mask[i]).collect();
    removed[0] = work.candidates.len() - alive.len();

    let before = alive.len();
    alive.retain(|&i| {
        let c = &work.candidates[i];
        filter_lidar_visibility(&c.object, &c.bbox, &scene.lidar, &scene.ego_pose, calib, cfg)
    });
    removed[1] = before - alive.len();

    let before = alive.len();
    alive.retain(|&i| {
        let c = &work.candidates[i];
        filter_edge_and_size(&c.object, &c.hull, calib, cfg)
    });
    removed[2] = before - alive.len();

    if cfg.require_unique_class && !filter_class_uniqueness(alive.iter().map(|&i| &work.candidates[i].object)) {
        removed[3] = alive.len();
        alive.clear();
    }
    (alive, removed)
}

pub fn run_filter_pipeline(
    scenes: &[SceneSample],
    cfg: &FilterConfig,
    captioner: &dyn ChatModel,
) -> Result<FilterOutput, FilterError> {
    cfg.validate()?;
    let by_id: HashMap<&str, &SceneSample> = scenes.iter().map(|s| (s.sample_id.as_str(), s)).collect();

    let works: Vec<ImageWork> = scenes
        .iter()
        .flat_map(|scene| {
            scene.cameras.iter().map(move |(name, view)| {
                let calib = &view.calibration;
                let candidates = scene
                    .objects
                    .iter()
                    .filter_map(|o| {
                        let hull = geometry::project_box3d_hull(&o.box3d, &scene.ego_pose, calib)?;
                        let bbox = hull.clip(calib.width(), calib.height())?;
                        Some(Candidate { object: o.clone(), hull, bbox })
                    })
                    .collect();
                ImageWork {
                    sample_id: scene.sample_id.clone(),
                    camera: name.clone(),
                    image: view.image.clone(),
                    candidates,
                }
            })
        })
        .collect();

    let label_results: Vec<(Vec<usize>, [usize; 4])> = works
        .par_iter()
        .map(|w| {
            let scene = by_id[w.sample_id.as_str()];
            label_stages(w, scene, &scene.cameras[&w.camera].calibration, cfg)
        })
        .collect();

    let limiter = InFlightLimiter::new(cfg.max_in_flight_captions);
    let jobs: Vec<(usize, usize)> = label_results
        .iter()
        .enumerate()
        .flat_map(|(wi, (alive, _))| alive.iter().map(move |&ci| (wi, ci)))
        .collect();
    let described: Vec<Result<DescriptionOutcome, FilterError>> = jobs
        .par_iter()
        .map(|&(wi, ci)| {
            let w = &works[wi];
            let c = &w.candidates[ci];
            if cfg.use_existing_descriptions {
                if let Some(d) = &c.object.description {
                    return Ok(match standardize_caption(d, &c.object.category) {
                        Some(s) => DescriptionOutcome::Accepted(s),
                        None => DescriptionOutcome::Rejected { caption: d.clone() },
                    });
                }
            }
            let _permit = limiter.acquire();
            describe_and_standardize(&c.object, &w.image, &c.bbox, captioner)
                .map_err(|source| FilterError::Captioner { object: c.object.id.clone(), source })
        })
        .collect();

    let mut outcome_of: BTreeMap<(usize, usize), DescriptionOutcome> = BTreeMap::new();
    for (job, res) in jobs.iter().zip(described) {
        outcome_of.insert(*job, res?);
    }

    let total_in: usize = works.iter().map(|w| w.candidates.len()).sum();
    let mut removed = [0usize; 5];
    let mut images_dropped_unique = 0;
    let mut images = Vec::new();
    let mut retained = Vec::new();
    for (wi, (w, (alive, r))) in works.iter().zip(&label_results).enumerate() {
        for k in 0..4 {
            removed[k] += r[k];
        }
        if r[3] > 0 {
            images_dropped_unique += 1;
        }
        let mut objects = Vec::new();
        for &ci in alive {
            let c = &w.candidates[ci];
            match &outcome_of[&(wi, ci)] {
                DescriptionOutcome::Accepted(d) => {
                    let mut object = c.object.clone();
                    object.description = Some(d.clone());
                    retained.push(ObjectRef {
                        sample_id: w.sample_id.clone(),
                        camera: w.camera.clone(),
                        object_id: object.id.clone(),
                    });
                    objects.push(RetainedObject { object, bbox: c.bbox });
                }
                DescriptionOutcome::Rejected { .. } => removed[4] += 1,
            }
        }
        if !objects.is_empty() {
            images.push(RetainedImage {
                sample_id: w.sample_id.clone(),
                camera: w.camera.clone(),
                image: w.image.clone(),
                objects,
            });
        }
    }

    let mut stages = Vec::with_capacity(5);
    let mut input = total_in;
    for (k, stage) in Stage::ORDER.iter().enumerate() {
        stages.push(StageCount {
            stage: *stage,
            input,
            removed: removed[k],
            images_removed: if *stage == Stage::ClassUniqueness { images_dropped_unique } else { 0 },
        });
        input -= removed[k];
    }
    let report = FilterReport {
        config: cfg.clone(),
        images: works.len(),
        images_retained: images.len(),
        stages,
        retained,
    };
    debug_assert!(report.telescopes());
    Ok(FilterOutput { images, report })
}
