//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Runs offline with scripted clients only.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use spatialvqa_core::client::{Matcher, ScriptReply, ScriptedClient};
use spatialvqa_core::cot::{run_cot_pipeline, CotClients, CotConfig};
use spatialvqa_core::filtering::{
    filter_class_uniqueness, filter_edge_and_size, filter_lidar_visibility, occlusion_keep_mask, run_filter_pipeline,
    standardize_caption, FilterConfig, FilterOutput, Stage,
};
use spatialvqa_core::geometry::{self, camera_to_global, centerness, global_to_camera, iou, CameraFramePoint};
use spatialvqa_core::response::parse_response;
use spatialvqa_core::reward::{compute_rewards_detailed, RewardConfig, ValueSet};
use spatialvqa_core::scene::{random_scenes, BBox2D, Box3D, CameraCalibration, Pose, SceneSample};
use spatialvqa_core::scoring::{overall_score, random_baseline, round2, PairingMode};
use spatialvqa_core::taskgen::{build_benchmark, BenchmarkManifest, GenConfig, ImageRef, QaPair, TaskKind, ALMOST_THE_SAME};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let started = Instant::now();
    let criteria: Vec<Criterion> = vec![
        ("aggregation parity", aggregation_parity),
        ("random-responder chance levels", random_chance),
        ("geometry oracle suite", geometry_oracle),
        ("filter-pipeline oracle equivalence", filter_oracle),
        ("reward engine golden suite", reward_golden),
        ("logic-reward leakage guard", leakage_guard),
        ("benchmark determinism", determinism),
        ("parser fuzz", parser_fuzz),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let t = Instant::now();
        let outcome = catch_unwind(run).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.2}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.2}s): {detail}");
            }
        }
    }
    let total = started.elapsed();
    let offline_ok = failed == 0 && total < Duration::from_secs(300);
    println!(
        "{}  full offline run ({:.2}s): {} of 8 criteria passed, scripted clients only, limit 300s",
        if offline_ok { "PASS" } else { "FAIL" },
        total.as_secs_f64(),
        8 - failed
    );
    if !offline_ok {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- aggregation

fn aggregation_parity() -> Outcome {
    let t = Instant::now();
    let rows: [([f64; 6], f64); 3] = [
        ([6.27, 3.81, 27.68, 17.84, 14.81, 10.49], 13.48),
        ([20.97, 44.81, 69.84, 49.30, 51.35, 8.54], 40.80),
        ([5.73, 1.12, 34.27, 8.76, 11.57, 11.89], 12.22),
    ];
    let mut got = Vec::new();
    for (scores, want) in rows {
        let overall = round2(overall_score(scores));
        ensure((overall - want).abs() <= 0.005, || format!("{scores:?} -> {overall}, expected {want}"))?;
        got.push(format!("{overall:.2}"));
    }
    let el = t.elapsed();
    ensure(el < Duration::from_secs(1), || format!("took {el:?}"))?;
    Ok(format!("overall {} for the three rows", got.join(" / ")))
}

// ---------------------------------------------------------------- random baseline

fn filtered(scenes: &[SceneSample]) -> FilterOutput {
    let cfg = FilterConfig { use_existing_descriptions: true, ..Default::default() };
    run_filter_pipeline(scenes, &cfg, &ScriptedClient::new(vec![])).expect("filter runs offline")
}

fn random_chance() -> Outcome {
    let per_task = 2000;
    let trials = 100;
    let scenes = random_scenes(4000, 11);
    let out = filtered(&scenes);
    let cfg = GenConfig::default().with_all_counts(per_task);
    let m = build_benchmark(&scenes, &out, &cfg, 11).map_err(|e| e.to_string())?;
    let q = m.question_counts();
    ensure(q.values().all(|&n| n >= per_task), || format!("question counts {q:?}"))?;

    let t = Instant::now();
    let paired = random_baseline(&m, trials, 5, PairingMode::Paired);
    let indep = random_baseline(&m, trials, 5, PairingMode::Independent);
    let el = t.elapsed();

    let third = 100.0 / 3.0;
    let checks = [
        ("yaw paired 4-opt", &paired, TaskKind::Yaw, 6.25),
        ("yaw single 4-opt", &indep, TaskKind::Yaw, 25.0),
        ("depth 3-opt", &paired, TaskKind::Depth, third),
        ("dis paired 3-opt", &paired, TaskKind::Distance, 100.0 / 9.0),
        ("l/r paired 3-opt", &paired, TaskKind::LeftRight, 100.0 / 9.0),
        ("f/b single 3-opt", &paired, TaskKind::FrontBehind, third),
    ];
    let mut parts = Vec::new();
    for (label, rb, task, chance) in checks {
        let score = rb.report.per_task[&task].score;
        let se = rb.std_error[&task];
        let z = (score - chance) / se;
        ensure(z.abs() <= 3.0, || format!("{label}: {score:.3} vs {chance:.3}, SE {se:.3}, z {z:.2}"))?;
        parts.push(format!("{label} {score:.2} (z {z:+.2})"));
    }
    ensure(el < Duration::from_secs(30), || format!("baseline took {el:?}"))?;
    Ok(format!("{} questions/task x {trials} trials; {}", per_task, parts.join(", ")))
}

// ---------------------------------------------------------------- geometry

/// Rotates `v` by the unit quaternion `[w, x, y, z]`.
fn qrot(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
    let [w, x, y, z] = q;
    // R from the quaternion, written out
    let r = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

fn conj(q: [f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn oracle_to_camera(p: [f64; 3], ego: &Pose, calib: &CameraCalibration) -> [f64; 3] {
    let in_ego = qrot(conj(ego.rotation), sub(p, ego.translation));
    qrot(conj(calib.extrinsic.rotation), sub(in_ego, calib.extrinsic.translation))
}

fn oracle_pixel(c: [f64; 3], calib: &CameraCalibration) -> Option<(f64, f64)> {
    if c[2] <= 0.0 {
        return None;
    }
    let k = calib.intrinsics;
    Some((k[0][0] * c[0] / c[2] + k[0][1] * c[1] / c[2] + k[0][2], k[1][1] * c[1] / c[2] + k[1][2]))
}

fn oracle_corners(b: &Box3D) -> Vec<[f64; 3]> {
    let [w, l, h] = b.size;
    let (s, c) = b.yaw.sin_cos();
    let mut out = Vec::new();
    for dx in [-l / 2.0, l / 2.0] {
        for dy in [-w / 2.0, w / 2.0] {
            for dz in [-h / 2.0, h / 2.0] {
                out.push([b.center[0] + c * dx - s * dy, b.center[1] + s * dx + c * dy, b.center[2] + dz]);
            }
        }
    }
    out
}

/// Brute-force hull of the projected corners, unclipped.
fn oracle_hull(b: &Box3D, ego: &Pose, calib: &CameraCalibration) -> Option<[f64; 4]> {
    let px: Vec<(f64, f64)> =
        oracle_corners(b).into_iter().filter_map(|p| oracle_pixel(oracle_to_camera(p, ego, calib), calib)).collect();
    if px.len() < 2 {
        return None;
    }
    let xs = px.iter().map(|p| p.0);
    let ys = px.iter().map(|p| p.1);
    let hull = [
        xs.clone().fold(f64::INFINITY, f64::min),
        ys.clone().fold(f64::INFINITY, f64::min),
        xs.fold(f64::NEG_INFINITY, f64::max),
        ys.fold(f64::NEG_INFINITY, f64::max),
    ];
    (hull[0] < hull[2] && hull[1] < hull[3]).then_some(hull)
}

fn oracle_clip(h: [f64; 4], calib: &CameraCalibration) -> Option<[f64; 4]> {
    let c = [
        h[0].max(0.0),
        h[1].max(0.0),
        h[2].min(calib.image_width as f64),
        h[3].min(calib.image_height as f64),
    ];
    (c[0] < c[2] && c[1] < c[3]).then_some(c)
}

fn random_pose(rng: &mut ChaCha8Rng, reach: f64) -> Pose {
    let q: [f64; 4] = [0; 4].map(|_| rng.gen_range(-1.0..1.0));
    let t: [f64; 3] = [0; 3].map(|_| rng.gen_range(-reach..reach));
    Pose::normalized(t, q).expect("nonzero quaternion")
}

fn close(a: [f64; 4], b: [f64; 4], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

fn geometry_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let ego = random_pose(&mut rng, 1000.0);
        let ext = random_pose(&mut rng, 3.0);
        let calib = CameraCalibration::new(1266.0, 1266.0, 816.0, 491.0, ext, 1600, 900).unwrap();
        let p = CameraFramePoint { x: rng.gen_range(-50.0..50.0), y: rng.gen_range(-50.0..50.0), z: rng.gen_range(0.1..80.0) };
        let g = camera_to_global(&p, &ego, &calib);
        let back = global_to_camera(&g, &ego, &calib);
        let err = ((back.x - p.x).powi(2) + (back.y - p.y).powi(2) + (back.z - p.z).powi(2)).sqrt();
        worst = worst.max(err);
        let oracle = oracle_to_camera([g.x, g.y, g.z], &ego, &calib);
        let oerr = ((oracle[0] - p.x).powi(2) + (oracle[1] - p.y).powi(2) + (oracle[2] - p.z).powi(2)).sqrt();
        worst = worst.max(oerr);
    }
    ensure(worst < 1e-6, || format!("round trip error {worst:e} m"))?;

    let scenes = random_scenes(60, 3);
    let (mut visible, mut hidden) = (0, 0);
    for s in &scenes {
        for view in s.cameras.values() {
            let calib = &view.calibration;
            for o in &s.objects {
                let lib = geometry::project_box3d(&o.box3d, &s.ego_pose, calib).map(|b| b.to_array());
                let orc = oracle_hull(&o.box3d, &s.ego_pose, calib).and_then(|h| oracle_clip(h, calib));
                match (lib, orc) {
                    (Some(a), Some(b)) if close(a, b, 1e-9) => visible += 1,
                    (None, None) => hidden += 1,
                    (a, b) => return Err(format!("{} {}: library {a:?} vs oracle {b:?}", s.sample_id, o.id)),
                }
            }
        }
    }
    ensure(visible > 0 && hidden > 0, || "fixtures do not cover both visible and hidden boxes".into())?;

    let gt = BBox2D::new(0.0, 0.0, 100.0, 60.0).unwrap();
    let hand = [(50.0, 30.0, 1.0), (150.0, 30.0, 0.0), (25.0, 30.0, (1.0f64 / 3.0).sqrt())];
    for (u, v, want) in hand {
        let c = centerness(u, v, &gt);
        ensure((c - want).abs() < 1e-6, || format!("centerness({u}, {v}) = {c}, expected {want}"))?;
    }
    Ok(format!(
        "round trip max error {worst:.1e} m over 1000 poses; {visible} visible and {hidden} hidden boxes match the corner oracle; centerness 1.0/0.0/0.5774"
    ))
}

// ---------------------------------------------------------------- filter oracle

#[derive(Default)]
struct OracleResult {
    removed: [usize; 5],
    images_dropped: usize,
    retained: Vec<(String, String, String)>,
    decisions: usize,
}

fn oracle_overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    let inter = if w > 0.0 && h > 0.0 { w * h } else { 0.0 };
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / area(a).min(area(b))
}

/// Independent re-implementation of every stage, also cross-checking the
/// library's per-object predicates on the same inputs.
fn oracle_filter(scenes: &[SceneSample], cfg: &FilterConfig) -> Result<OracleResult, String> {
    let mut res = OracleResult::default();
    for s in scenes {
        for (cam, view) in &s.cameras {
            let calib = &view.calibration;
            let (w, h) = (calib.image_width as f64, calib.image_height as f64);
            let cands: Vec<_> = s
                .objects
                .iter()
                .filter_map(|o| {
                    let hull = oracle_hull(&o.box3d, &s.ego_pose, calib)?;
                    let clipped = oracle_clip(hull, calib)?;
                    Some((o, hull, clipped))
                })
                .collect();
            let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);

            // occlusion
            let keep: Vec<bool> = cands
                .iter()
                .map(|(oi, _, bi)| {
                    !cands.iter().any(|(oj, _, bj)| {
                        oi.id != oj.id
                            && oracle_overlap(*bi, *bj) > cfg.occlusion_threshold
                            && (area(*bj) > area(*bi) || (area(*bj) == area(*bi) && oj.id < oi.id))
                    })
                })
                .collect();
            let items: Vec<(&str, BBox2D)> = cands
                .iter()
                .map(|(o, _, b)| (o.id.as_str(), BBox2D::new(b[0], b[1], b[2], b[3]).unwrap()))
                .collect();
            let lib_keep = occlusion_keep_mask(&items, cfg.occlusion_threshold);
            ensure(keep == lib_keep, || format!("{} {cam}: occlusion {keep:?} vs library {lib_keep:?}", s.sample_id))?;
            res.decisions += keep.len();
            let mut alive: Vec<usize> = (0..cands.len()).filter(|&i| keep[i]).collect();
            res.removed[0] += cands.len() - alive.len();

            // lidar: same-class returns projecting into the clipped box
            let before = alive.len();
            let mut next = Vec::new();
            for &i in &alive {
                let (o, hull, b) = cands[i];
                let hits = s
                    .lidar
                    .iter()
                    .filter(|p| p.semantic_class == o.category)
                    .filter_map(|p| oracle_pixel(oracle_to_camera(p.position, &s.ego_pose, calib), calib))
                    .filter(|(u, v)| *u >= b[0] && *u <= b[2] && *v >= b[1] && *v <= b[3])
                    .count();
                let ours = hits >= cfg.min_lidar_points;
                let lib_box = geometry::project_box3d_hull(&o.box3d, &s.ego_pose, calib)
                    .and_then(|hb| hb.clip(w, h))
                    .ok_or_else(|| format!("library lost {}", o.id))?;
                ensure(close(lib_box.to_array(), b, 1e-9) && close(
                    geometry::project_box3d_hull(&o.box3d, &s.ego_pose, calib).unwrap().to_array(),
                    hull,
                    1e-9,
                ), || format!("{}: boxes differ", o.id))?;
                let theirs = filter_lidar_visibility(o, &lib_box, &s.lidar, &s.ego_pose, calib, cfg);
                ensure(ours == theirs, || format!("{} {cam} {}: lidar {hits} hits, library says {theirs}", s.sample_id, o.id))?;
                res.decisions += 1;
                if ours {
                    next.push(i);
                }
            }
            alive = next;
            res.removed[1] += before - alive.len();

            // edge and size
            let before = alive.len();
            let mut next = Vec::new();
            for &i in &alive {
                let (o, hull, b) = cands[i];
                let (cu, cv) = ((hull[0] + hull[2]) / 2.0, (hull[1] + hull[3]) / 2.0);
                let ours = cu >= 0.0 && cu <= w && cv >= 0.0 && cv <= h && area(b) >= cfg.min_pixel_area;
                let lib_hull = BBox2D::new(hull[0], hull[1], hull[2], hull[3]).unwrap();
                let theirs = filter_edge_and_size(o, &lib_hull, calib, cfg);
                ensure(ours == theirs, || format!("{} {cam} {}: edge/size {ours} vs library {theirs}", s.sample_id, o.id))?;
                res.decisions += 1;
                if ours {
                    next.push(i);
                }
            }
            alive = next;
            res.removed[2] += before - alive.len();

            // uniqueness: sort the categories and look for neighbours that agree
            let mut cats: Vec<&str> = alive.iter().map(|&i| cands[i].0.category.as_str()).collect();
            cats.sort();
            let unique = cats.windows(2).all(|p| p[0] != p[1]);
            let theirs = filter_class_uniqueness(alive.iter().map(|&i| cands[i].0));
            ensure(unique == theirs, || format!("{} {cam}: uniqueness {unique} vs library {theirs}", s.sample_id))?;
            res.decisions += 1;
            if cfg.require_unique_class && !unique {
                res.removed[3] += alive.len();
                res.images_dropped += 1;
                alive.clear();
            }

            for &i in &alive {
                let o = cands[i].0;
                let ok = o.description.as_deref().and_then(|d| standardize_caption(d, &o.category)).is_some();
                if ok {
                    res.retained.push((s.sample_id.clone(), cam.clone(), o.id.clone()));
                } else {
                    res.removed[4] += 1;
                }
            }
        }
    }
    Ok(res)
}

fn filter_oracle() -> Outcome {
    let scenes = random_scenes(80, 21);
    let cfg = FilterConfig { use_existing_descriptions: true, ..Default::default() };
    let oracle = oracle_filter(&scenes, &cfg)?;
    let out = filtered(&scenes);
    let report = &out.report;
    ensure(report.telescopes(), || "report does not telescope".into())?;
    for (k, stage) in Stage::ORDER.iter().enumerate() {
        let sc = &report.stages[k];
        ensure(sc.stage == *stage && sc.removed == oracle.removed[k], || {
            format!("{stage:?}: library removed {}, oracle {}", sc.removed, oracle.removed[k])
        })?;
    }
    ensure(report.stages[3].images_removed == oracle.images_dropped, || "images dropped differ".into())?;
    let lib: Vec<(String, String, String)> =
        report.retained.iter().map(|r| (r.sample_id.clone(), r.camera.clone(), r.object_id.clone())).collect();
    ensure(lib == oracle.retained, || format!("retained {} vs oracle {}", lib.len(), oracle.retained.len()))?;
    ensure(oracle.removed.iter().all(|&r| r > 0), || {
        format!("fixtures leave a stage unexercised: removals {:?}", oracle.removed)
    })?;
    Ok(format!(
        "{} scenes, {} images, {} per-object decisions agree; removals per stage {:?}, {} retained; telescopes",
        scenes.len(),
        report.images,
        oracle.decisions,
        oracle.removed,
        lib.len()
    ))
}

// ---------------------------------------------------------------- rewards

const YAW_QUESTION: &str = "If the camera faces north, which direction is the white sedan facing? Options: North, East, South, West.";

fn qa_base(task: TaskKind, prompt: &str, options: &[&str], gt: &str, boxes: &[(&str, [f64; 4])]) -> QaPair {
    QaPair {
        qa_id: format!("{}-fixture", task.as_str()),
        image: ImageRef { sample_id: "fx".into(), camera: "CAM_FRONT".into(), path: "fx.jpg".into(), width: 1600, height: 900 },
        task,
        prompt: prompt.into(),
        options: options.iter().map(|s| s.to_string()).collect(),
        gt_answer: gt.into(),
        gt_boxes: boxes
            .iter()
            .map(|(d, b)| (d.to_string(), BBox2D::new(b[0], b[1], b[2], b[3]).unwrap()))
            .collect(),
        pair_id: None,
        variant_tag: None,
        facts: BTreeMap::new(),
    }
}

fn yaw_qa() -> QaPair {
    qa_base(TaskKind::Yaw, YAW_QUESTION, &["North", "East", "South", "West"], "North", &[("white sedan", [100.0, 100.0, 200.0, 200.0])])
}

fn dis_qa() -> QaPair {
    qa_base(
        TaskKind::Distance,
        "Which is closer to the camera, the red bus or the grey barrier?",
        &["red bus", "grey barrier", ALMOST_THE_SAME],
        "red bus",
        &[("red bus", [0.0, 0.0, 100.0, 100.0]), ("grey barrier", [300.0, 300.0, 400.0, 350.0])],
    )
}

fn px_qa() -> QaPair {
    qa_base(TaskKind::Pixel, "Where is the center of the orange traffic cone?", &[], "[150, 125]", &[("orange traffic cone", [100.0, 100.0, 200.0, 150.0])])
}

struct Fixture {
    name: &'static str,
    qa: QaPair,
    response: String,
    verifier: &'static str,
    /// Expected high/low for format, location, accuracy, logic.
    expect: [bool; 4],
    verifier_called: bool,
}

fn fx(name: &'static str, qa: QaPair, response: &str, verifier: &'static str, expect: [bool; 4], called: bool) -> Fixture {
    Fixture { name, qa, response: response.into(), verifier, expect, verifier_called: called }
}

fn fixtures() -> Vec<Fixture> {
    let loc = "<location>[[white sedan]: [100, 100, 200, 200]]</location>";
    let v_north = "<answer>North</answer>";
    vec![
        fx("all channels high", yaw_qa(), &format!("{loc}<think>The sedan points away from us.</think><answer>North</answer>"), v_north, [true; 4], true),
        fx("iou exactly 0.5", yaw_qa(), "<location>[[white sedan]: [100, 100, 200, 150]]</location><think>Away.</think><answer>North</answer>", v_north, [true, false, true, true], true),
        fx("iou 0.5 + 1e-6", yaw_qa(), "<location>[[white sedan]: [100, 100, 200, 150.0001]]</location><think>Away.</think><answer>North</answer>", v_north, [true, true, true, true], true),
        fx("missing location tag", yaw_qa(), "<think>Away.</think><answer>North</answer>", v_north, [false, false, true, true], true),
        fx("out of order tags", yaw_qa(), &format!("<think>Away.</think><answer>North</answer>{loc}"), v_north, [false, true, true, true], true),
        fx("malformed box", yaw_qa(), "<location>[[white sedan]: [100, 100, 200]]</location><think>Away.</think><answer>North</answer>", v_north, [false, false, true, true], true),
        fx("duplicate answer tag", yaw_qa(), &format!("{loc}<think>Away.</think><answer>North</answer><answer>East</answer>"), v_north, [false, true, true, true], true),
        fx("empty answer", yaw_qa(), &format!("{loc}<think>Away.</think><answer> </answer>"), v_north, [false, true, false, false], true),
        fx("empty trace", yaw_qa(), &format!("{loc}<think>  </think><answer>North</answer>"), v_north, [true, true, true, false], false),
        fx("verifier mismatch", yaw_qa(), &format!("{loc}<think>It drives toward the right.</think><answer>North</answer>"), "<answer>East</answer>", [true, true, true, false], true),
        fx("verifier without answer tag", yaw_qa(), &format!("{loc}<think>Away.</think><answer>North</answer>"), "North", [true, true, true, false], true),
        fx("wrong answer, consistent trace", yaw_qa(), &format!("{loc}<think>It faces us.</think><answer>South</answer>"), "<answer>South</answer>", [true, true, false, true], true),
        fx("answer inside a sentence", yaw_qa(), &format!("{loc}<think>Away.</think><answer>The sedan is facing North.</answer>"), v_north, [true, true, true, true], true),
        fx("ambiguous answer", yaw_qa(), &format!("{loc}<think>Hard to say.</think><answer>North or South</answer>"), v_north, [true, true, false, false], true),
        fx("case and spacing tolerant tags", yaw_qa(), "< LOCATION >[[white sedan]: [100, 100, 200, 200]]</location>\n<Think>Away.</ think><answer>north</answer>", v_north, [true, true, true, true], true),
        fx("two objects both located", dis_qa(), "<location>[[red bus]: [0, 0, 100, 100], [grey barrier]: [300, 300, 400, 350]]</location><think>The bus is larger and lower.</think><answer>red bus</answer>", "<answer>red bus</answer>", [true; 4], true),
        fx("two objects, one missed", dis_qa(), "<location>[[red bus]: [0, 0, 100, 100], [grey barrier]: [500, 500, 600, 550]]</location><think>Bus.</think><answer>red bus</answer>", "<answer>the red bus</answer>", [true, false, true, true], true),
        fx("pixel at the center", px_qa(), "<location>[[orange traffic cone]: [100, 100, 200, 150]]</location><think>Middle of the box.</think><answer>[150, 125]</answer>", "<answer>[150, 125]</answer>", [true; 4], true),
        fx("pixel near the edge", px_qa(), "<location>[[orange traffic cone]: [100, 100, 200, 150]]</location><think>Corner.</think><answer>(105, 104)</answer>", "<answer>[105, 104]</answer>", [true, true, false, true], true),
    ]
}

fn reward_golden() -> Outcome {
    let mut checked = 0;
    for f in fixtures() {
        let mut patterns = Vec::new();
        for vs in [ValueSet::ZeroOne, ValueSet::NegOneOne] {
            let cfg = RewardConfig { value_set: vs, ..Default::default() };
            let verifier = ScriptedClient::new(vec![]).fallback(f.verifier);
            let d = compute_rewards_detailed(&f.qa, &f.response, Some(&verifier), &cfg).map_err(|e| format!("{}: {e}", f.name))?;
            let r = &d.rewards;
            let want: Vec<f64> = f.expect.iter().map(|&hit| vs.value(hit)).collect();
            let got = [r.format, r.location, r.accuracy, r.logic];
            ensure(got.as_slice() == want.as_slice(), || format!("{} ({vs:?}): got {got:?}, golden {want:?}", f.name))?;
            ensure((r.total - want.iter().sum::<f64>()).abs() < 1e-12, || format!("{}: total {}", f.name, r.total))?;
            ensure((verifier.calls() > 0) == f.verifier_called, || format!("{}: verifier calls {}", f.name, verifier.calls()))?;
            patterns.push(r.pattern());
        }
        ensure(patterns[0] == patterns[1], || format!("{}: value sets disagree {patterns:?}", f.name))?;
        checked += 1;
    }

    // the IoU boundary itself
    let gt = BBox2D::new(100.0, 100.0, 200.0, 200.0).unwrap();
    let at = iou(&BBox2D::new(100.0, 100.0, 200.0, 150.0).unwrap(), &gt);
    let above = iou(&BBox2D::new(100.0, 100.0, 200.0, 150.0001).unwrap(), &gt);
    ensure(at == 0.5, || format!("boundary fixture has IoU {at}"))?;
    ensure((above - (0.5 + 1e-6)).abs() < 1e-12, || format!("near-boundary fixture has IoU {above}"))?;
    ensure(checked >= 12, || format!("only {checked} fixtures"))?;
    Ok(format!("{checked} fixtures match golden values under {{0,1}} and {{-1,1}} with identical patterns; IoU 0.5 -> low, 0.500001 -> high"))
}

fn leakage_guard() -> Outcome {
    let mut prompts = 0;
    for f in fixtures() {
        let verifier = ScriptedClient::new(vec![]).fallback(f.verifier);
        let d = compute_rewards_detailed(&f.qa, &f.response, Some(&verifier), &RewardConfig::default())
            .map_err(|e| format!("{}: {e}", f.name))?;
        let trace = parse_response(&f.response, true).think;
        for req in verifier.transcript() {
            let text = req.prompt_text();
            ensure(text.contains(&trace), || format!("{}: verifier prompt lacks the trace", f.name))?;
            ensure(!text.contains(&f.qa.prompt), || format!("{}: verifier prompt leaks the question", f.name))?;
            ensure(req.images.is_empty(), || format!("{}: verifier was sent the image", f.name))?;
            prompts += 1;
        }
        if let Some(p) = d.logic.and_then(|l| l.verifier_prompt) {
            ensure(!p.contains(&f.qa.prompt), || format!("{}: recorded prompt leaks the question", f.name))?;
        }
    }
    ensure(prompts >= 12, || format!("only {prompts} verifier prompts"))?;
    Ok(format!("{prompts} verifier prompts contain the trace and never the question text or image"))
}

// ---------------------------------------------------------------- determinism

fn sha(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn cot_script(m: &BenchmarkManifest) -> ScriptedClient {
    let answers: BTreeSet<&str> = m.qa.iter().map(|q| q.gt_answer.as_str()).collect();
    let mut c = ScriptedClient::new(vec![]).on(
        "generalizable problem-solving principles",
        "- Step 1: Locate every object named in the question.\n- Step 2: Compare the relevant geometric quantity.\n- Step 3: Choose the matching option.",
    );
    for a in &answers {
        c = c.rule(
            Matcher::ContainsAll(vec!["Evaluate the structured response".into(), format!("<answer>{a}</answer>")]),
            vec![ScriptReply::Text(format!(
                "<reason>The steps support the answer.</reason>\n<validation>Valid</validation>\n<think>Located the objects and compared them, which gives {a}.</think>\n<answer>{a}</answer>"
            ))],
        );
    }
    for a in &answers {
        c = c.on(
            &format!("Answer: {a}\n"),
            &format!("<think>Located the objects and compared them, which gives {a}.</think>\n<answer>{a}</answer>"),
        );
    }
    c
}

// Digests of the fixed-seed outputs below. A platform that produces other
// bytes fails here.
const MANIFEST_SHA256: &str = "1c6049451000e988d422bf6f310f87e188e23cdda83b83deffb8717485ba8afb";
const COT_SHA256: &str = "a3987cdb2dfff07b7666d370081dc0627dad89488492f3def898df0e84726795";

fn determinism() -> Outcome {
    let run = || -> Result<(String, String), String> {
        let scenes = random_scenes(40, 77);
        let out = filtered(&scenes);
        let m = build_benchmark(&scenes, &out, &GenConfig::default().with_all_counts(6), 77).map_err(|e| e.to_string())?;
        let client = cot_script(&m);
        let cfg = CotConfig { k: 3, max_in_flight: 3, ..Default::default() };
        let cot = run_cot_pipeline(&m, &CotClients::single(&client), &cfg, 77).map_err(|e| e.to_string())?;
        ensure(cot.report.telescopes(), || "CoT report does not telescope".into())?;
        ensure(cot.report.emitted > 0, || format!("no CoT samples emitted: {:?}", cot.report))?;

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mpath = dir.path().join("bench.jsonl");
        let cpath = dir.path().join("cot.jsonl");
        spatialvqa_core::taskgen::write_manifest(&m, &mpath).map_err(|e| e.to_string())?;
        std::fs::write(&cpath, cot.dataset_jsonl()).map_err(|e| e.to_string())?;
        let read = |p| std::fs::read_to_string(p).map_err(|e: std::io::Error| e.to_string());
        Ok((read(&mpath)?, read(&cpath)?))
    };
    let (m1, c1) = run()?;
    let (m2, c2) = run()?;
    ensure(m1 == m2, || "manifest bytes differ between runs".into())?;
    ensure(c1 == c2, || "CoT dataset bytes differ between runs".into())?;
    let (hm, hc) = (sha(&m1), sha(&c1));
    ensure(hm == MANIFEST_SHA256, || format!("manifest digest {hm} differs from the pinned {MANIFEST_SHA256}"))?;
    ensure(hc == COT_SHA256, || format!("CoT digest {hc} differs from the pinned {COT_SHA256}"))?;
    Ok(format!(
        "two runs byte-identical and equal to the pinned digests; manifest {} lines sha256 {}.., CoT dataset {} lines sha256 {}..",
        m1.lines().count(),
        &hm[..16],
        c1.lines().count(),
        &hc[..16]
    ))
}

// ---------------------------------------------------------------- parser fuzz

const PIECES: &[&str] = &[
    "<location>", "</location>", "<think>", "</think>", "<answer>", "</answer>", "< THINK >", "</ Answer>", "<Location >",
    "[car]: [1, 2, 30, 40]", "[red bus]: [0.5, 1, 200, 300.25]", "truck: [3, 4, 5, 6]", "[x]: [5, 5, 1, 1]", "[a]: [1, 2]",
    ", ", "North", "Almost the same", "[12, 34]", "(5, 6)", "the car is left", "\n", "  ", "<", ">", "/", "[", "]", ":",
    "é", "日本", "\u{0}",
];

fn raw_bytes(rng: &mut ChaCha8Rng) -> String {
    let bytes: Vec<u8> = (0..rng.gen_range(0..200)).map(|_| rng.gen()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn tag_soup(rng: &mut ChaCha8Rng) -> String {
    (0..rng.gen_range(0..14)).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect()
}

fn random_words(rng: &mut ChaCha8Rng, max: usize) -> String {
    const WORDS: &[&str] = &["the", "car", "is", "left", "of", "bus", "North", "12.5", "m", "é", "日本", "(3, 4)", "<", ">", "&", "{x}"];
    (0..rng.gen_range(0..max)).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn spelled(rng: &mut ChaCha8Rng, name: &str, closing: bool) -> String {
    let pad = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.2) { " " } else { "" };
    let name = if rng.gen_bool(0.2) { name.to_uppercase() } else { name.to_string() };
    let slash = if closing { "/" } else { "" };
    format!("<{}{slash}{}{name}{}>", pad(rng), pad(rng), pad(rng))
}

/// A response shaped like a model reply, with random content, spelling and
/// occasional damage.
fn shaped(rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    if rng.gen_bool(0.7) {
        let entries: Vec<String> = (0..rng.gen_range(1..4))
            .map(|_| {
                let x0: f64 = (rng.gen_range(0.0..1000.0f64) * 4.0).round() / 4.0;
                let y0: f64 = rng.gen_range(0..900) as f64;
                let (w, h) = (rng.gen_range(0.5..300.0f64), rng.gen_range(1..300) as f64);
                let label = random_words(rng, 4).replace(['[', ']', '<', '>'], "");
                let label = if label.trim().is_empty() { "car".to_string() } else { label };
                format!("[{label}]: [{x0}, {y0}, {}, {}]", x0 + w, y0 + h)
            })
            .collect();
        out.push_str(&format!("{}[{}]{}", spelled(rng, "location", false), entries.join(", "), spelled(rng, "location", true)));
        out.push_str(if rng.gen_bool(0.5) { "\n" } else { "" });
    }
    let think = random_words(rng, 12).replace(['<', '>'], "");
    out.push_str(&format!("{}{think}{}\n", spelled(rng, "think", false), spelled(rng, "think", true)));
    let answer = random_words(rng, 5).replace(['<', '>'], "");
    out.push_str(&format!("{}{answer}{}", spelled(rng, "answer", false), spelled(rng, "answer", true)));
    if rng.gen_bool(0.2) {
        // damage: drop or duplicate a random slice
        let cut = rng.gen_range(0..out.len());
        let cut = (0..=cut).rev().find(|&i| out.is_char_boundary(i)).unwrap_or(0);
        if rng.gen_bool(0.5) {
            out.truncate(cut);
        } else {
            let tail = out[cut..].to_string();
            out.push_str(&tail);
        }
    }
    out
}

fn parser_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut well, mut crashes) = (0, 0);
    for i in 0..20_000 {
        let text = match i {
            0..10_000 => raw_bytes(&mut rng),
            _ if i % 2 == 0 => tag_soup(&mut rng),
            _ => shaped(&mut rng),
        };
        let expects = i % 3 != 0;
        let res = catch_unwind(AssertUnwindSafe(|| {
            let p = parse_response(&text, expects);
            if p.well_formed {
                let again = parse_response(&p.emit(expects), expects);
                if !(again.well_formed
                    && again.canonical
                    && again.locations == p.locations
                    && again.think == p.think
                    && again.answer == p.answer)
                {
                    return Err(format!("round trip changed {text:?}: {p:?} -> {again:?}"));
                }
                return Ok(true);
            }
            Ok(false)
        }));
        match res {
            Ok(Ok(w)) => well += usize::from(w),
            Ok(Err(e)) => return Err(e),
            Err(_) => crashes += 1,
        }
    }
    ensure(crashes == 0, || format!("{crashes} inputs crashed the parser"))?;
    ensure(well > 0, || "no well-formed inputs were generated".into())?;
    Ok(format!("10000 random byte strings plus 10000 tag-soup and reply-shaped strings, no crash; {well} well-formed inputs round-trip"))
}
