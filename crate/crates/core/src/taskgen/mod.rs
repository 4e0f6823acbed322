//! The six spatial QA tasks: generation from retained objects and benchmark assembly.

mod manifest;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::filtering::FilterOutput;
use crate::geometry::{self, CameraFacing, CameraFramePoint, DepthMode};
use crate::prompt;
use crate::scene::{BBox2D, CameraCalibration, ObjectAnnotation, Pose, SceneSample};

pub use manifest::{read_manifest, write_manifest, BenchmarkManifest, ManifestError, MANIFEST_FORMAT};

pub const ALMOST_THE_SAME: &str = "Almost the same";
pub const FB_YES: &str = "Yes";
pub const FB_NO: &str = "No";
pub const FB_SAME: &str = "Almost the same in terms of front-back position";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Yaw,
    Pixel,
    Depth,
    Distance,
    LeftRight,
    FrontBehind,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] =
        [Self::Yaw, Self::Pixel, Self::Depth, Self::Distance, Self::LeftRight, Self::FrontBehind];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Yaw => "yaw",
            Self::Pixel => "pixel",
            Self::Depth => "depth",
            Self::Distance => "distance",
            Self::LeftRight => "left_right",
            Self::FrontBehind => "front_behind",
        }
    }

    /// Column header used in score tables.
    pub fn short_label(self) -> &'static str {
        match self {
            Self::Yaw => "Yaw",
            Self::Pixel => "Pixel",
            Self::Depth => "Depth",
            Self::Distance => "Dis",
            Self::LeftRight => "L/R",
            Self::FrontBehind => "F/B",
        }
    }

    pub fn is_multi_object(self) -> bool {
        matches!(self, Self::Distance | Self::LeftRight | Self::FrontBehind)
    }

    pub fn has_options(self) -> bool {
        self != Self::Pixel
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '/'], "_");
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == norm || k.short_label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub sample_id: String,
    pub camera: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub qa_id: String,
    pub image: ImageRef,
    pub task: TaskKind,
    /// Rendered task template (without the response-format block).
    pub prompt: String,
    pub options: Vec<String>,
    pub gt_answer: String,
    pub gt_boxes: BTreeMap<String, BBox2D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_tag: Option<String>,
    /// Ground-truth quantities behind the answer, meters rounded to 2 decimals.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub facts: BTreeMap<String, f64>,
}

impl QaPair {
    /// Text sent to a model: task prompt followed by the response-format instructions.
    pub fn model_prompt(&self, with_location: bool) -> String {
        let fmt = if with_location { prompt::FORMAT_WITH_LOCATION } else { prompt::FORMAT_WITHOUT_LOCATION };
        format!("{}\n\n{}", self.prompt.trim_end(), fmt.trim_end())
    }

    /// Ground-truth pixel for Pixel questions.
    pub fn gt_pixel(&self) -> Option<(f64, f64)> {
        if self.task != TaskKind::Pixel {
            return None;
        }
        parse_pixel_pair(&self.gt_answer)
    }

    /// Checks the per-record invariants.
    pub fn check(&self) -> Result<(), String> {
        if self.gt_boxes.is_empty() {
            return Err(format!("{}: no ground-truth boxes", self.qa_id));
        }
        if self.task.has_options() {
            let hits = self.options.iter().filter(|o| **o == self.gt_answer).count();
            if hits != 1 {
                return Err(format!("{}: answer {:?} appears {hits} times among options", self.qa_id, self.gt_answer));
            }
        } else {
            if !self.options.is_empty() {
                return Err(format!("{}: pixel question carries options", self.qa_id));
            }
            if self.gt_pixel().is_none() {
                return Err(format!("{}: pixel answer {:?} is not a pair", self.qa_id, self.gt_answer));
            }
        }
        Ok(())
    }
}

/// Parses "[x, y]" or "(x, y)" (brackets optional).
pub fn parse_pixel_pair(text: &str) -> Option<(f64, f64)> {
    let t = text.trim();
    let inner = t
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .or_else(|| t.strip_prefix('(').and_then(|r| r.strip_suffix(')')))
        .unwrap_or(t);
    let mut parts = inner.split(',');
    let x: f64 = parts.next()?.trim().parse().ok()?;
    let y: f64 = parts.next()?.trim().parse().ok()?;
    if parts.next().is_some() || !x.is_finite() || !y.is_finite() {
        return None;
    }
    Some((x, y))
}

pub fn format_pixel(u: f64, v: f64) -> String {
    format!("[{}, {}]", u.round() as i64, v.round() as i64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelTarget {
    /// Center of the projected (clipped) 2D box.
    #[default]
    BoxCenter,
    /// Projection of the 3D box center.
    ProjectedCenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub split: String,
    /// Questions per task. A paired question yields two records.
    pub counts: BTreeMap<TaskKind, usize>,
    pub depth_bin_width: f64,
    pub depth_tie_m: f64,
    pub lateral_tie_m: f64,
    pub depth_mode: DepthMode,
    pub pixel_target: PixelTarget,
    /// Also ask the "behind" variant of each front/behind question.
    pub pair_front_behind: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            split: "val".into(),
            counts: TaskKind::ALL.into_iter().map(|k| (k, 0)).collect(),
            depth_bin_width: 4.0,
            depth_tie_m: 1.0,
            lateral_tie_m: 0.5,
            depth_mode: DepthMode::OpticalAxis,
            pixel_target: PixelTarget::BoxCenter,
            pair_front_behind: false,
        }
    }
}

impl GenConfig {
    pub fn with_count(mut self, task: TaskKind, n: usize) -> Self {
        self.counts.insert(task, n);
        self
    }

    pub fn with_all_counts(mut self, n: usize) -> Self {
        for k in TaskKind::ALL {
            self.counts.insert(k, n);
        }
        self
    }

    pub fn validate(&self) -> Result<(), TaskGenError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.depth_bin_width) {
            return Err(TaskGenError::Config(format!("depth_bin_width must be > 0, got {}", self.depth_bin_width)));
        }
        if !(self.depth_tie_m.is_finite() && self.depth_tie_m >= 0.0) {
            return Err(TaskGenError::Config(format!("depth_tie_m must be >= 0, got {}", self.depth_tie_m)));
        }
        if !(self.lateral_tie_m.is_finite() && self.lateral_tie_m >= 0.0) {
            return Err(TaskGenError::Config(format!("lateral_tie_m must be >= 0, got {}", self.lateral_tie_m)));
        }
        Ok(())
    }

    /// First 16 hex chars of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskGenError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("object {0} does not project into the image")]
    NotVisible(String),
    #[error("object {0} is behind the camera")]
    BehindCamera(String),
    #[error("both objects are described as {0:?}; the question would be ambiguous")]
    AmbiguousPair(String),
    #[error("no scene/camera for retained image {sample_id}/{camera}")]
    UnknownImage { sample_id: String, camera: String },
    #[error("filter output has no retained images")]
    EmptyInput,
    #[error("task {task}: requested {requested} questions but only {available} candidates are eligible")]
    Shortfall { task: TaskKind, requested: usize, available: usize },
}

/// Everything a generator needs to know about one camera image.
#[derive(Debug, Clone, Copy)]
pub struct ImageContext<'a> {
    pub image: &'a ImageRef,
    pub ego: &'a Pose,
    pub calib: &'a CameraCalibration,
}

impl ImageContext<'_> {
    fn gt_box(&self, obj: &ObjectAnnotation) -> Result<BBox2D, TaskGenError> {
        geometry::project_box3d(&obj.box3d, self.ego, self.calib)
            .and_then(|b| b.rounded())
            .ok_or_else(|| TaskGenError::NotVisible(obj.id.clone()))
    }

    fn depth(&self, obj: &ObjectAnnotation, mode: DepthMode) -> Result<f64, TaskGenError> {
        geometry::object_distance(&obj.box3d, self.ego, self.calib, mode)
            .map_err(|_| TaskGenError::BehindCamera(obj.id.clone()))
    }
}

fn round2(v: f64) -> f64 {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Deterministic per-record RNG from the global seed and the record id.
pub fn record_rng(seed: u64, qa_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(qa_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn shuffled(mut options: Vec<String>, seed: u64, qa_id: &str) -> Vec<String> {
    options.shuffle(&mut record_rng(seed, qa_id));
    options
}

fn variant_id(pair_id: &str, tag: &str) -> String {
    format!("{pair_id}-{tag}")
}

fn distinct_names(a: &ObjectAnnotation, b: &ObjectAnnotation) -> Result<(String, String), TaskGenError> {
    let (na, nb) = (a.display_name(), b.display_name());
    if na == nb {
        return Err(TaskGenError::AmbiguousPair(na));
    }
    Ok((na, nb))
}

pub fn gen_yaw(ctx: &ImageContext, obj: &ObjectAnnotation, pair_id: &str, seed: u64) -> Result<Vec<QaPair>, TaskGenError> {
    let gt_box = ctx.gt_box(obj)?;
    let name = obj.display_name();
    let heading = geometry::relative_heading_deg(&obj.box3d, ctx.ego, ctx.calib);
    let all: Vec<String> = geometry::CompassDirection::ALL.iter().map(|d| d.as_str().to_string()).collect();
    Ok([CameraFacing::North, CameraFacing::South]
        .into_iter()
        .map(|facing| {
            let qa_id = variant_id(pair_id, facing.as_lowercase());
            let options = shuffled(all.clone(), seed, &qa_id);
            let gt = geometry::compass_from_relative_heading(heading, facing);
            let text = prompt::render(
                prompt::YAW,
                &[("facing", facing.as_lowercase()), ("object", &name), ("options", &prompt::option_lines(&options))],
            );
            QaPair {
                qa_id,
                image: ctx.image.clone(),
                task: TaskKind::Yaw,
                prompt: text,
                options,
                gt_answer: gt.as_str().to_string(),
                gt_boxes: BTreeMap::from([(name.clone(), gt_box)]),
                pair_id: Some(pair_id.to_string()),
                variant_tag: Some(format!("facing-{}", facing.as_lowercase())),
                facts: BTreeMap::from([("relative_heading_deg".to_string(), round2(heading))]),
            }
        })
        .collect())
}

pub fn gen_pixel(
    ctx: &ImageContext,
    obj: &ObjectAnnotation,
    qa_id: &str,
    cfg: &GenConfig,
) -> Result<QaPair, TaskGenError> {
    let visible = geometry::project_box3d(&obj.box3d, ctx.ego, ctx.calib)
        .ok_or_else(|| TaskGenError::NotVisible(obj.id.clone()))?;
    let gt_box = ctx.gt_box(obj)?;
    let (u, v) = match cfg.pixel_target {
        PixelTarget::BoxCenter => visible.center(),
        PixelTarget::ProjectedCenter => {
            let p: CameraFramePoint = geometry::global_to_camera(&obj.box3d.center_vec(), ctx.ego, ctx.calib);
            let (u, v) = geometry::project_point(&p, ctx.calib).map_err(|_| TaskGenError::BehindCamera(obj.id.clone()))?;
            if !visible.contains(u, v) {
                return Err(TaskGenError::NotVisible(obj.id.clone()));
            }
            (u, v)
        }
    };
    let name = obj.display_name();
    Ok(QaPair {
        qa_id: qa_id.to_string(),
        image: ctx.image.clone(),
        task: TaskKind::Pixel,
        prompt: prompt::render(prompt::PIXEL, &[("object", &name)]),
        options: Vec::new(),
        gt_answer: format_pixel(u, v),
        gt_boxes: BTreeMap::from([(name, gt_box)]),
        pair_id: None,
        variant_tag: None,
        facts: BTreeMap::new(),
    })
}

/// Half-open interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBin {
    pub lo: f64,
    pub hi: f64,
}

impl DepthBin {
    pub fn contains(&self, d: f64) -> bool {
        d >= self.lo && d < self.hi
    }

    pub fn label(&self) -> String {
        format!("between {} meters and {} meters", fmt_meters(self.lo), fmt_meters(self.hi))
    }
}

fn fmt_meters(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v:.2}")
    }
}

/// Three adjacent bins of width `w` and the index of the one holding `depth`.
///
/// The correct bin is centered on `floor(depth)`. When its left neighbour
/// would start below zero the layout falls back to `[0,w), [w,2w), [2w,3w)`.
pub fn depth_bins(depth: f64, w: f64) -> ([DepthBin; 3], usize) {
    let lo = depth.floor() - w / 2.0;
    if lo - w >= 0.0 {
        let bins = [
            DepthBin { lo: lo - w, hi: lo },
            DepthBin { lo, hi: lo + w },
            DepthBin { lo: lo + w, hi: lo + 2.0 * w },
        ];
        (bins, 1)
    } else {
        let bins = [0.0, 1.0, 2.0].map(|k| DepthBin { lo: k * w, hi: (k + 1.0) * w });
        let idx = ((depth / w).floor().max(0.0) as usize).min(2);
        (bins, idx)
    }
}

pub fn gen_depth(
    ctx: &ImageContext,
    obj: &ObjectAnnotation,
    qa_id: &str,
    cfg: &GenConfig,
    seed: u64,
) -> Result<QaPair, TaskGenError> {
    let gt_box = ctx.gt_box(obj)?;
    let depth = ctx.depth(obj, cfg.depth_mode)?;
    let (bins, idx) = depth_bins(depth, cfg.depth_bin_width);
    let gt = bins[idx].label();
    let options = shuffled(bins.iter().map(DepthBin::label).collect(), seed, qa_id);
    let name = obj.display_name();
    Ok(QaPair {
        qa_id: qa_id.to_string(),
        image: ctx.image.clone(),
        task: TaskKind::Depth,
        prompt: prompt::render(prompt::DEPTH, &[("object", &name), ("options", &prompt::option_lines(&options))]),
        options,
        gt_answer: gt,
        gt_boxes: BTreeMap::from([(name, gt_box)]),
        pair_id: None,
        variant_tag: None,
        facts: BTreeMap::from([("depth_m".to_string(), round2(depth))]),
    })
}

/// Shared body of the two-object comparison tasks.
struct Comparison<'a> {
    ctx: &'a ImageContext<'a>,
    a: &'a ObjectAnnotation,
    b: &'a ObjectAnnotation,
    name_a: String,
    name_b: String,
    boxes: BTreeMap<String, BBox2D>,
}

impl<'a> Comparison<'a> {
    fn new(ctx: &'a ImageContext<'a>, a: &'a ObjectAnnotation, b: &'a ObjectAnnotation) -> Result<Self, TaskGenError> {
        let (name_a, name_b) = distinct_names(a, b)?;
        let boxes = BTreeMap::from([(name_a.clone(), ctx.gt_box(a)?), (name_b.clone(), ctx.gt_box(b)?)]);
        Ok(Self { ctx, a, b, name_a, name_b, boxes })
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        task: TaskKind,
        qa_id: String,
        text: String,
        options: Vec<String>,
        gt: String,
        pair_id: Option<&str>,
        tag: Option<&str>,
        facts: &BTreeMap<String, f64>,
    ) -> QaPair {
        QaPair {
            qa_id,
            image: self.ctx.image.clone(),
            task,
            prompt: text,
            options,
            gt_answer: gt,
            gt_boxes: self.boxes.clone(),
            pair_id: pair_id.map(str::to_string),
            variant_tag: tag.map(str::to_string),
            facts: facts.clone(),
        }
    }
}

pub fn gen_distance(
    ctx: &ImageContext,
    a: &ObjectAnnotation,
    b: &ObjectAnnotation,
    pair_id: &str,
    cfg: &GenConfig,
    seed: u64,
) -> Result<Vec<QaPair>, TaskGenError> {
    let c = Comparison::new(ctx, a, b)?;
    let (da, db) = (ctx.depth(c.a, cfg.depth_mode)?, ctx.depth(c.b, cfg.depth_mode)?);
    let tie = (da - db).abs() < cfg.depth_tie_m;
    let (near, far) = if da < db { (&c.name_a, &c.name_b) } else { (&c.name_b, &c.name_a) };
    let facts = BTreeMap::from([("depth_a_m".to_string(), round2(da)), ("depth_b_m".to_string(), round2(db))]);
    Ok([("closer", near), ("farther", far)]
        .into_iter()
        .map(|(relation, winner)| {
            let qa_id = variant_id(pair_id, relation);
            let options =
                shuffled(vec![c.name_a.clone(), c.name_b.clone(), ALMOST_THE_SAME.to_string()], seed, &qa_id);
            let text = prompt::render(
                prompt::DISTANCE,
                &[
                    ("object_a", &c.name_a),
                    ("object_b", &c.name_b),
                    ("relation", relation),
                    ("options", &prompt::option_lines(&options)),
                ],
            );
            let gt = if tie { ALMOST_THE_SAME.to_string() } else { winner.clone() };
            c.record(TaskKind::Distance, qa_id, text, options, gt, Some(pair_id), Some(relation), &facts)
        })
        .collect())
}

pub fn gen_leftright(
    ctx: &ImageContext,
    a: &ObjectAnnotation,
    b: &ObjectAnnotation,
    pair_id: &str,
    cfg: &GenConfig,
    seed: u64,
) -> Result<Vec<QaPair>, TaskGenError> {
    let c = Comparison::new(ctx, a, b)?;
    // depth check doubles as the behind-camera guard
    ctx.depth(c.a, DepthMode::OpticalAxis)?;
    ctx.depth(c.b, DepthMode::OpticalAxis)?;
    let xa = geometry::lateral_offset(&c.a.box3d, ctx.ego, ctx.calib);
    let xb = geometry::lateral_offset(&c.b.box3d, ctx.ego, ctx.calib);
    let tie = (xa - xb).abs() < cfg.lateral_tie_m;
    let (left, right) = if xa < xb { (&c.name_a, &c.name_b) } else { (&c.name_b, &c.name_a) };
    let facts = BTreeMap::from([("offset_a_m".to_string(), round2(xa)), ("offset_b_m".to_string(), round2(xb))]);
    Ok([("left", left), ("right", right)]
        .into_iter()
        .map(|(side, winner)| {
            let qa_id = variant_id(pair_id, side);
            let options =
                shuffled(vec![c.name_a.clone(), c.name_b.clone(), ALMOST_THE_SAME.to_string()], seed, &qa_id);
            let text = prompt::render(
                prompt::LEFT_RIGHT,
                &[
                    ("side", side),
                    ("object_a", &c.name_a),
                    ("object_b", &c.name_b),
                    ("options", &prompt::option_lines(&options)),
                ],
            );
            let gt = if tie { ALMOST_THE_SAME.to_string() } else { winner.clone() };
            c.record(TaskKind::LeftRight, qa_id, text, options, gt, Some(pair_id), Some(side), &facts)
        })
        .collect())
}

/// "Is A in front of B?" where farther from the camera counts as more forward.
/// With `cfg.pair_front_behind` a linked "behind" variant is emitted as well.
pub fn gen_frontbehind(
    ctx: &ImageContext,
    a: &ObjectAnnotation,
    b: &ObjectAnnotation,
    qa_id: &str,
    cfg: &GenConfig,
    seed: u64,
) -> Result<Vec<QaPair>, TaskGenError> {
    let c = Comparison::new(ctx, a, b)?;
    let (da, db) = (ctx.depth(c.a, cfg.depth_mode)?, ctx.depth(c.b, cfg.depth_mode)?);
    let facts = BTreeMap::from([("depth_a_m".to_string(), round2(da)), ("depth_b_m".to_string(), round2(db))]);
    let answer = |delta: f64| {
        if delta.abs() < cfg.depth_tie_m {
            FB_SAME
        } else if delta > 0.0 {
            FB_YES
        } else {
            FB_NO
        }
    };
    let variants: Vec<(&str, f64)> =
        if cfg.pair_front_behind { vec![("in front of", da - db), ("behind", db - da)] } else { vec![("in front of", da - db)] };
    let paired = variants.len() > 1;
    Ok(variants
        .into_iter()
        .map(|(relation, delta)| {
            let tag = if relation == "behind" { "behind" } else { "front" };
            let id = if paired { variant_id(qa_id, tag) } else { qa_id.to_string() };
            let options = shuffled(vec![FB_YES.into(), FB_NO.into(), FB_SAME.into()], seed, &id);
            let text = prompt::render(
                prompt::FRONT_BEHIND,
                &[
                    ("object_a", &c.name_a),
                    ("relation", relation),
                    ("object_b", &c.name_b),
                    ("options", &prompt::option_lines(&options)),
                ],
            );
            let (pair, vtag) = if paired { (Some(qa_id), Some(tag)) } else { (None, None) };
            c.record(TaskKind::FrontBehind, id, text, options, answer(delta).to_string(), pair, vtag, &facts)
        })
        .collect())
}

struct PreparedImage<'a> {
    image: ImageRef,
    ego: &'a Pose,
    calib: &'a CameraCalibration,
    objects: Vec<&'a ObjectAnnotation>,
}

fn task_rng(seed: u64, task: TaskKind) -> ChaCha8Rng {
    record_rng(seed, &format!("select/{}", task.as_str()))
}

enum Job {
    Single { task: TaskKind, img: usize, obj: usize },
    Multi { task: TaskKind, img: usize, a: usize, b: usize },
}

/// Assembles a benchmark from filter output. Output is a pure function of
/// the inputs and `seed`.
pub fn build_benchmark(
    scenes: &[SceneSample],
    filtered: &FilterOutput,
    cfg: &GenConfig,
    seed: u64,
) -> Result<BenchmarkManifest, TaskGenError> {
    cfg.validate()?;
    if filtered.images.is_empty() {
        return Err(TaskGenError::EmptyInput);
    }
    let by_id: HashMap<&str, &SceneSample> = scenes.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut prepared = Vec::with_capacity(filtered.images.len());
    for ri in &filtered.images {
        let unknown = || TaskGenError::UnknownImage { sample_id: ri.sample_id.clone(), camera: ri.camera.clone() };
        let scene = by_id.get(ri.sample_id.as_str()).ok_or_else(unknown)?;
        let view = scene.cameras.get(&ri.camera).ok_or_else(unknown)?;
        prepared.push(PreparedImage {
            image: ImageRef {
                sample_id: ri.sample_id.clone(),
                camera: ri.camera.clone(),
                path: ri.image.clone(),
                width: view.calibration.image_width,
                height: view.calibration.image_height,
            },
            ego: &scene.ego_pose,
            calib: &view.calibration,
            objects: ri.objects.iter().map(|o| &o.object).collect(),
        });
    }

    let singles: Vec<(usize, usize)> = prepared
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.objects.len()).map(move |j| (i, j)))
        .collect();
    let multis: Vec<(usize, usize, usize)> = prepared
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            let objs = &p.objects;
            (0..objs.len()).flat_map(move |a| {
                ((a + 1)..objs.len())
                    .filter(move |&b| {
                        objs[a].category != objs[b].category && objs[a].display_name() != objs[b].display_name()
                    })
                    .map(move |b| (i, a, b))
            })
        })
        .collect();

    let mut jobs = Vec::new();
    for task in TaskKind::ALL {
        let want = cfg.counts.get(&task).copied().unwrap_or(0);
        if want == 0 {
            continue;
        }
        let mut rng = task_rng(seed, task);
        if task.is_multi_object() {
            if multis.len() < want {
                return Err(TaskGenError::Shortfall { task, requested: want, available: multis.len() });
            }
            let mut pool = multis.clone();
            pool.shuffle(&mut rng);
            for (img, a, b) in pool.into_iter().take(want) {
                let (a, b) = if rng.gen_bool(0.5) { (b, a) } else { (a, b) };
                jobs.push(Job::Multi { task, img, a, b });
            }
        } else {
            if singles.len() < want {
                return Err(TaskGenError::Shortfall { task, requested: want, available: singles.len() });
            }
            let mut pool = singles.clone();
            pool.shuffle(&mut rng);
            jobs.extend(pool.into_iter().take(want).map(|(img, obj)| Job::Single { task, img, obj }));
        }
    }

    let mut seq: BTreeMap<TaskKind, usize> = BTreeMap::new();
    let numbered: Vec<(String, &Job)> = jobs
        .iter()
        .map(|job| {
            let task = match job {
                Job::Single { task, .. } | Job::Multi { task, .. } => *task,
            };
            let n = seq.entry(task).or_insert(0);
            *n += 1;
            (format!("{}-{:06}", task.as_str(), n), job)
        })
        .collect();

    let generated: Vec<Result<Vec<QaPair>, TaskGenError>> = numbered
        .par_iter()
        .map(|(id, job)| match **job {
            Job::Single { task, img, obj } => {
                let p = &prepared[img];
                let ctx = ImageContext { image: &p.image, ego: p.ego, calib: p.calib };
                let o = p.objects[obj];
                match task {
                    TaskKind::Yaw => gen_yaw(&ctx, o, id, seed),
                    TaskKind::Pixel => gen_pixel(&ctx, o, id, cfg).map(|q| vec![q]),
                    _ => gen_depth(&ctx, o, id, cfg, seed).map(|q| vec![q]),
                }
            }
            Job::Multi { task, img, a, b } => {
                let p = &prepared[img];
                let ctx = ImageContext { image: &p.image, ego: p.ego, calib: p.calib };
                let (oa, ob) = (p.objects[a], p.objects[b]);
                match task {
                    TaskKind::Distance => gen_distance(&ctx, oa, ob, id, cfg, seed),
                    TaskKind::LeftRight => gen_leftright(&ctx, oa, ob, id, cfg, seed),
                    _ => gen_frontbehind(&ctx, oa, ob, id, cfg, seed),
                }
            }
        })
        .collect();

    let mut qa = Vec::new();
    for g in generated {
        qa.extend(g?);
    }
    Ok(BenchmarkManifest::new(cfg.split.clone(), seed, cfg.hash(), qa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CompassDirection;
    use crate::scene::{build_synthetic_scene, SyntheticCamera, SyntheticObject, SyntheticSceneSpec};

    fn scene_with(objects: Vec<SyntheticObject>) -> SceneSample {
        build_synthetic_scene(&SyntheticSceneSpec {
            sample_id: "s0".into(),
            cameras: vec![SyntheticCamera::front("CAM_FRONT")],
            objects,
            ..Default::default()
        })
        .unwrap()
    }

    fn obj(id: &str, cat: &str, desc: &str, pos: [f64; 3], heading: f64) -> SyntheticObject {
        let mut o = SyntheticObject::new(id, cat, "CAM_FRONT", pos);
        o.heading_deg = heading;
        o.description = Some(desc.into());
        o
    }

    fn image_ref() -> ImageRef {
        ImageRef { sample_id: "s0".into(), camera: "CAM_FRONT".into(), path: "img.jpg".into(), width: 1600, height: 900 }
    }

    fn with_ctx<T>(scene: &SceneSample, f: impl FnOnce(&ImageContext) -> T) -> T {
        let image = image_ref();
        let calib = &scene.cameras["CAM_FRONT"].calibration;
        f(&ImageContext { image: &image, ego: &scene.ego_pose, calib })
    }

    #[test]
    fn yaw_pair_along_axis() {
        let scene = scene_with(vec![obj("a", "vehicle.car", "white car", [0.0, 0.0, 10.0], 0.0)]);
        let qas = with_ctx(&scene, |c| gen_yaw(c, &scene.objects[0], "yaw-000001", 7)).unwrap();
        assert_eq!(qas.len(), 2);
        assert_eq!(qas[0].gt_answer, "North");
        assert_eq!(qas[1].gt_answer, "South");
        assert_eq!(qas[0].pair_id, qas[1].pair_id);
        for q in &qas {
            let mut opts = q.options.clone();
            opts.sort();
            assert_eq!(opts, ["East", "North", "South", "West"]);
            q.check().unwrap();
        }
        assert!(qas[0].prompt.contains("The camera in the image is facing north"));
        assert!(qas[1].prompt.contains("facing south"));
    }

    #[test]
    fn yaw_clockwise_quarter_turn() {
        let scene = scene_with(vec![obj("a", "vehicle.car", "white car", [0.0, 0.0, 10.0], 90.0)]);
        let qas = with_ctx(&scene, |c| gen_yaw(c, &scene.objects[0], "y", 7)).unwrap();
        assert_eq!(qas[0].gt_answer, "East");
        assert_eq!(qas[1].gt_answer, "West");
        let north: CompassDirection = geometry::CompassDirection::ALL
            .into_iter()
            .find(|d| d.as_str() == qas[0].gt_answer)
            .unwrap();
        assert_eq!(north.opposite().as_str(), qas[1].gt_answer);
    }

    #[test]
    fn pixel_on_axis_is_principal_point() {
        let scene = scene_with(vec![obj("a", "vehicle.car", "white car", [0.0, 0.0, 10.0], 0.0)]);
        let q = with_ctx(&scene, |c| gen_pixel(c, &scene.objects[0], "p", &GenConfig::default())).unwrap();
        assert_eq!(q.gt_answer, "[800, 450]");
        assert!(q.options.is_empty());
        q.check().unwrap();
        let cfg = GenConfig { pixel_target: PixelTarget::ProjectedCenter, ..Default::default() };
        let q = with_ctx(&scene, |c| gen_pixel(c, &scene.objects[0], "p", &cfg)).unwrap();
        assert_eq!(q.gt_answer, "[800, 450]");
    }

    #[test]
    fn pixel_behind_camera_errors() {
        let mut scene = scene_with(vec![obj("a", "vehicle.car", "white car", [0.0, 0.0, 10.0], 0.0)]);
        // move the box behind the camera (camera z is ego x for the front camera)
        scene.objects[0].box3d.center[0] = -10.0;
        let err = with_ctx(&scene, |c| gen_pixel(c, &scene.objects[0], "p", &GenConfig::default())).unwrap_err();
        assert_eq!(err, TaskGenError::NotVisible("a".into()));
    }

    #[test]
    fn depth_bins_examples() {
        let (bins, idx) = depth_bins(10.0, 4.0);
        assert_eq!(bins[idx].label(), "between 8 meters and 12 meters");
        assert_eq!(bins[0].label(), "between 4 meters and 8 meters");
        assert_eq!(bins[2].label(), "between 12 meters and 16 meters");
        let (bins, idx) = depth_bins(1.0, 4.0);
        assert_eq!(bins[0].lo, 0.0);
        assert_eq!(idx, 0);
        let (bins, _) = depth_bins(5.0, 3.0);
        assert_eq!(bins[1].label(), "between 3.50 meters and 6.50 meters");
    }

    #[test]
    fn depth_question_has_one_containing_option() {
        let scene = scene_with(vec![obj("a", "vehicle.car", "white car", [1.0, 0.0, 10.0], 0.0)]);
        let q = with_ctx(&scene, |c| gen_depth(c, &scene.objects[0], "d", &GenConfig::default(), 1)).unwrap();
        assert_eq!(q.gt_answer, "between 8 meters and 12 meters");
        assert_eq!(q.options.len(), 3);
        assert_eq!(q.facts["depth_m"], 10.0);
        q.check().unwrap();
    }

    fn two(pa: [f64; 3], pb: [f64; 3]) -> SceneSample {
        scene_with(vec![
            obj("a", "vehicle.car", "white car", pa, 0.0),
            obj("b", "vehicle.truck", "red truck", pb, 0.0),
        ])
    }

    #[test]
    fn distance_variants() {
        let scene = two([0.0, 0.0, 5.0], [2.0, 0.0, 20.0]);
        let cfg = GenConfig::default();
        let qas = with_ctx(&scene, |c| gen_distance(c, &scene.objects[0], &scene.objects[1], "x", &cfg, 3)).unwrap();
        assert_eq!(qas[0].gt_answer, "white car");
        assert_eq!(qas[1].gt_answer, "red truck");
        assert!(qas[0].prompt.contains("Which object, white car or red truck, is closer to the camera?"));
        assert!(qas[0].options.contains(&ALMOST_THE_SAME.to_string()));

        let scene = two([0.0, 0.0, 10.0], [3.0, 0.0, 10.4]);
        let qas = with_ctx(&scene, |c| gen_distance(c, &scene.objects[0], &scene.objects[1], "x", &cfg, 3)).unwrap();
        assert!(qas.iter().all(|q| q.gt_answer == ALMOST_THE_SAME));
    }

    #[test]
    fn identical_descriptions_are_rejected() {
        let scene = two([0.0, 0.0, 5.0], [2.0, 0.0, 20.0]);
        let cfg = GenConfig::default();
        let err = with_ctx(&scene, |c| gen_distance(c, &scene.objects[0], &scene.objects[0], "x", &cfg, 3)).unwrap_err();
        assert!(matches!(err, TaskGenError::AmbiguousPair(_)));
        let err =
            with_ctx(&scene, |c| gen_frontbehind(c, &scene.objects[0], &scene.objects[0], "x", &cfg, 3)).unwrap_err();
        assert!(matches!(err, TaskGenError::AmbiguousPair(_)));
    }

    #[test]
    fn left_right_variants() {
        let cfg = GenConfig::default();
        let scene = two([-2.0, 0.0, 10.0], [1.0, 0.0, 12.0]);
        let qas = with_ctx(&scene, |c| gen_leftright(c, &scene.objects[0], &scene.objects[1], "x", &cfg, 3)).unwrap();
        assert_eq!(qas[0].variant_tag.as_deref(), Some("left"));
        assert_eq!(qas[0].gt_answer, "white car");
        assert_eq!(qas[1].gt_answer, "red truck");
        assert!(qas[0].prompt.contains("Which is further left, white car or red truck?"));

        let scene = two([0.1, 0.0, 10.0], [0.3, 0.0, 14.0]);
        let qas = with_ctx(&scene, |c| gen_leftright(c, &scene.objects[0], &scene.objects[1], "x", &cfg, 3)).unwrap();
        assert!(qas.iter().all(|q| q.gt_answer == ALMOST_THE_SAME));
    }

    #[test]
    fn front_behind_inverted_semantics() {
        let cfg = GenConfig::default();
        let fb = |pa, pb| {
            let scene = two(pa, pb);
            with_ctx(&scene, |c| gen_frontbehind(c, &scene.objects[0], &scene.objects[1], "f", &cfg, 3)).unwrap()
        };
        let q = &fb([0.0, 0.0, 20.0], [2.0, 0.0, 5.0])[0];
        assert_eq!(q.gt_answer, "Yes");
        assert!(q.prompt.contains("Is white car in front of red truck?"));
        assert_eq!(fb([0.0, 0.0, 5.0], [2.0, 0.0, 20.0])[0].gt_answer, "No");
        assert_eq!(fb([0.0, 0.0, 10.0], [2.0, 0.0, 10.5])[0].gt_answer, FB_SAME);

        let paired = GenConfig { pair_front_behind: true, ..Default::default() };
        let scene = two([0.0, 0.0, 20.0], [2.0, 0.0, 5.0]);
        let qas =
            with_ctx(&scene, |c| gen_frontbehind(c, &scene.objects[0], &scene.objects[1], "f", &paired, 3)).unwrap();
        assert_eq!(qas.len(), 2);
        assert_eq!((qas[0].gt_answer.as_str(), qas[1].gt_answer.as_str()), ("Yes", "No"));
        assert_eq!(qas[1].pair_id.as_deref(), Some("f"));
    }

    #[test]
    fn gt_boxes_match_projection() {
        let scene = two([-2.0, 0.0, 10.0], [3.0, 0.5, 15.0]);
        let cfg = GenConfig::default();
        let qas = with_ctx(&scene, |c| gen_leftright(c, &scene.objects[0], &scene.objects[1], "x", &cfg, 3)).unwrap();
        let calib = &scene.cameras["CAM_FRONT"].calibration;
        for o in &scene.objects {
            let proj = geometry::project_box3d(&o.box3d, &scene.ego_pose, calib).unwrap();
            let gt = qas[0].gt_boxes[&o.display_name()];
            for (p, g) in proj.to_array().iter().zip(gt.to_array()) {
                assert!((p - g).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn task_kind_parsing() {
        assert_eq!("left-right".parse::<TaskKind>().unwrap(), TaskKind::LeftRight);
        assert_eq!("F/B".parse::<TaskKind>().unwrap(), TaskKind::FrontBehind);
        assert!("nope".parse::<TaskKind>().is_err());
    }

    #[test]
    fn pixel_pair_parsing() {
        assert_eq!(parse_pixel_pair("[800, 450]"), Some((800.0, 450.0)));
        assert_eq!(parse_pixel_pair("(1.5,2)"), Some((1.5, 2.0)));
        assert_eq!(parse_pixel_pair("[1, 2, 3]"), None);
        assert_eq!(parse_pixel_pair("north"), None);
    }
}
