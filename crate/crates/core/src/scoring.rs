//! Benchmark scoring: 0/1 answer matching, centerness for Pixel, per-task
//! means and the overall mean of task scores.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::centerness;
use crate::response::{normalize_answer, normalize_gt, parse_response, NormalizedAnswer, ParsedResponse};
use crate::taskgen::{record_rng, BenchmarkManifest, QaPair, TaskKind};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// A pair scores the minimum of its variants and counts once.
    #[default]
    Paired,
    /// Every record counts on its own.
    Independent,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("records {a} and {b} are not variants of one pair")]
    PairMismatch { a: String, b: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    /// 0..=100.
    pub score: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_task: BTreeMap<TaskKind, TaskScore>,
    pub overall: f64,
    pub pairing_mode: PairingMode,
}

impl ScoreReport {
    /// Overall = mean of the scores of tasks that have at least one question.
    pub fn from_tasks(per_task: BTreeMap<TaskKind, TaskScore>, pairing_mode: PairingMode) -> Self {
        let overall = overall_score(per_task.values().filter(|t| t.count > 0).map(|t| t.score));
        Self { per_task, overall, pairing_mode }
    }

    /// Line-delimited records: one per task, then the overall line.
    /// Values are rounded to 2 decimals here and nowhere else.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (task, t) in &self.per_task {
            let rec = serde_json::json!({"record": "task", "task": task, "score": round2(t.score), "count": t.count});
            let _ = writeln!(out, "{rec}");
        }
        let rec = serde_json::json!({
            "record": "overall",
            "score": round2(self.overall),
            "pairing_mode": self.pairing_mode,
        });
        let _ = writeln!(out, "{rec}");
        out
    }

    pub fn table(&self) -> String {
        let mut head = String::from("|");
        let mut rule = String::from("|");
        let mut row = String::from("|");
        for task in TaskKind::ALL {
            let cell = self.per_task.get(&task).map(|t| format!("{:.2}", t.score)).unwrap_or_else(|| "-".into());
            let w = cell.len().max(task.short_label().len());
            let _ = write!(head, " {:>w$} |", task.short_label());
            let _ = write!(rule, "{}|", "-".repeat(w + 2));
            let _ = write!(row, " {cell:>w$} |");
        }
        let cell = format!("{:.2}", self.overall);
        let w = cell.len().max(5);
        let _ = write!(head, " {:>w$} |", "Score");
        let _ = write!(rule, "{}|", "-".repeat(w + 2));
        let _ = write!(row, " {cell:>w$} |");
        format!("{head}\n{rule}\n{row}\n")
    }
}

pub fn round2(v: f64) -> f64 {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Arithmetic mean; 0 for an empty set.
pub fn overall_score(task_scores: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = task_scores.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn gt_box_for_pixel(qa: &QaPair) -> Option<&crate::scene::BBox2D> {
    qa.gt_boxes.values().next()
}

/// Score in the answer space already normalized.
pub fn score_normalized(qa: &QaPair, answer: &NormalizedAnswer) -> f64 {
    match (qa.task, answer) {
        (TaskKind::Pixel, NormalizedAnswer::Pixel(u, v)) => match gt_box_for_pixel(qa) {
            Some(b) => centerness(*u, *v, b),
            None => 0.0,
        },
        (TaskKind::Pixel, _) => 0.0,
        _ => {
            if answer.same_as(&normalize_gt(&qa.gt_answer, qa.task)) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// 0/1 for option tasks, centerness in [0,1] for Pixel.
pub fn score_qa(qa: &QaPair, resp: &ParsedResponse) -> f64 {
    score_normalized(qa, &normalize_answer(&resp.answer, qa.task, &qa.options))
}

/// Scores two variants of one pair. Paired mode yields one value, the
/// minimum; independent mode yields both.
pub fn score_paired(
    qa_a: &QaPair,
    qa_b: &QaPair,
    resp_a: &ParsedResponse,
    resp_b: &ParsedResponse,
    mode: PairingMode,
) -> Result<Vec<f64>, ScoringError> {
    if qa_a.pair_id.is_none() || qa_a.pair_id != qa_b.pair_id || qa_a.qa_id == qa_b.qa_id {
        return Err(ScoringError::PairMismatch { a: qa_a.qa_id.clone(), b: qa_b.qa_id.clone() });
    }
    let (a, b) = (score_qa(qa_a, resp_a), score_qa(qa_b, resp_b));
    Ok(match mode {
        PairingMode::Paired => vec![a.min(b)],
        PairingMode::Independent => vec![a, b],
    })
}

/// Groups records into scoring units: singletons, or all variants of a pair
/// in paired mode. Unit order follows sorted keys so it does not depend on
/// manifest order.
fn units(manifest: &BenchmarkManifest, mode: PairingMode) -> BTreeMap<TaskKind, Vec<Vec<&QaPair>>> {
    let mut groups: BTreeMap<(TaskKind, String), Vec<&QaPair>> = BTreeMap::new();
    for q in &manifest.qa {
        let key = match (mode, &q.pair_id) {
            (PairingMode::Paired, Some(p)) => format!("pair:{p}"),
            _ => format!("qa:{}", q.qa_id),
        };
        groups.entry((q.task, key)).or_default().push(q);
    }
    let mut out: BTreeMap<TaskKind, Vec<Vec<&QaPair>>> = BTreeMap::new();
    for ((task, _), mut g) in groups {
        g.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));
        out.entry(task).or_default().push(g);
    }
    out
}

/// Task scores from per-record scores. Records without a score count as 0.
pub fn aggregate(scores: &HashMap<String, f64>, manifest: &BenchmarkManifest, mode: PairingMode) -> ScoreReport {
    let mut per_task = BTreeMap::new();
    for (task, us) in units(manifest, mode) {
        let sum: f64 = us
            .iter()
            .map(|u| u.iter().map(|q| scores.get(&q.qa_id).copied().unwrap_or(0.0)).fold(f64::INFINITY, f64::min))
            .sum();
        let n = us.len();
        per_task.insert(task, TaskScore { score: 100.0 * sum / n as f64, count: n });
    }
    ScoreReport::from_tasks(per_task, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub pairing_mode: PairingMode,
    /// Only used to decide which tags are expected; scoring reads the answer.
    pub expects_location: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pairing_mode: PairingMode::Paired, expects_location: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaScore {
    pub qa_id: String,
    pub task: TaskKind,
    pub score: f64,
    pub answered: bool,
}

/// Parses and scores every record; `responses` maps qa_id to raw model text.
pub fn evaluate(
    manifest: &BenchmarkManifest,
    responses: &HashMap<String, String>,
    cfg: &EvalConfig,
) -> (ScoreReport, Vec<QaScore>) {
    let per_qa: Vec<QaScore> = manifest
        .qa
        .par_iter()
        .map(|q| match responses.get(&q.qa_id) {
            Some(text) => {
                let parsed = parse_response(text, cfg.expects_location);
                QaScore { qa_id: q.qa_id.clone(), task: q.task, score: score_qa(q, &parsed), answered: true }
            }
            None => QaScore { qa_id: q.qa_id.clone(), task: q.task, score: 0.0, answered: false },
        })
        .collect();
    let map: HashMap<String, f64> = per_qa.iter().map(|s| (s.qa_id.clone(), s.score)).collect();
    (aggregate(&map, manifest, cfg.pairing_mode), per_qa)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub report: ScoreReport,
    /// Monte-Carlo standard error of each task score, same 0..100 scale.
    pub std_error: BTreeMap<TaskKind, f64>,
    pub trials: usize,
}

fn random_answer(q: &QaPair, rng: &mut impl Rng) -> NormalizedAnswer {
    if q.task == TaskKind::Pixel {
        let w = f64::from(q.image.width.max(1));
        let h = f64::from(q.image.height.max(1));
        NormalizedAnswer::Pixel(rng.gen_range(0.0..w), rng.gen_range(0.0..h))
    } else if q.options.is_empty() {
        NormalizedAnswer::Unmatched
    } else {
        NormalizedAnswer::Option(q.options[rng.gen_range(0..q.options.len())].clone())
    }
}

/// Uniform-random responder: a random option per question, a uniform pixel
/// for Pixel. Each unit-trial is one sample; the standard error is the sample
/// standard deviation over `N * trials` samples divided by its square root.
pub fn random_baseline(manifest: &BenchmarkManifest, trials: usize, seed: u64, mode: PairingMode) -> RandomBaseline {
    let trials = trials.max(1);
    let mut per_task = BTreeMap::new();
    let mut std_error = BTreeMap::new();
    for (task, us) in units(manifest, mode) {
        let samples: Vec<f64> = us
            .par_iter()
            .flat_map_iter(|u| {
                (0..trials).map(move |t| {
                    u.iter()
                        .map(|q| {
                            let mut rng = record_rng(seed, &format!("random/{}/{t}", q.qa_id));
                            score_normalized(q, &random_answer(q, &mut rng))
                        })
                        .fold(f64::INFINITY, f64::min)
                })
            })
            .collect();
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        per_task.insert(task, TaskScore { score: 100.0 * mean, count: us.len() });
        std_error.insert(task, 100.0 * (var / n).sqrt());
    }
    RandomBaseline { report: ScoreReport::from_tasks(per_task, mode), std_error, trials }
}

/// One `{"qa_id", "response"}` object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub qa_id: String,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum ResponseFileError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("duplicate response for {0}")]
    Duplicate(String),
}

pub fn read_responses(r: impl io::BufRead) -> Result<HashMap<String, String>, ResponseFileError> {
    let mut out = HashMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| ResponseFileError::Line { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ResponseRecord = serde_json::from_str(&line)
            .map_err(|e| ResponseFileError::Line { line: i + 1, message: e.to_string() })?;
        if out.insert(rec.qa_id.clone(), rec.response).is_some() {
            return Err(ResponseFileError::Duplicate(rec.qa_id));
        }
    }
    Ok(out)
}

pub fn write_responses(mut w: impl Write, records: &[ResponseRecord]) -> io::Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::BBox2D;
    use crate::taskgen::ImageRef;

    fn qa(id: &str, task: TaskKind, options: &[&str], gt: &str, pair: Option<&str>) -> QaPair {
        QaPair {
            qa_id: id.into(),
            image: ImageRef { sample_id: "s".into(), camera: "c".into(), path: "p".into(), width: 100, height: 100 },
            task,
            prompt: "q".into(),
            options: options.iter().map(|s| s.to_string()).collect(),
            gt_answer: gt.into(),
            gt_boxes: BTreeMap::from([("x".to_string(), BBox2D::new(0.0, 0.0, 10.0, 10.0).unwrap())]),
            pair_id: pair.map(str::to_string),
            variant_tag: None,
            facts: BTreeMap::new(),
        }
    }

    fn resp(answer: &str) -> ParsedResponse {
        parse_response(&format!("<think>t</think><answer>{answer}</answer>"), false)
    }

    const DIRS: [&str; 4] = ["North", "East", "South", "West"];

    #[test]
    fn option_scores() {
        let q = qa("y", TaskKind::Yaw, &DIRS, "North", None);
        assert_eq!(score_qa(&q, &resp("North")), 1.0);
        assert_eq!(score_qa(&q, &resp("East")), 0.0);
    }

    #[test]
    fn pixel_scores() {
        let q = qa("p", TaskKind::Pixel, &[], "[5, 5]", None);
        assert_eq!(score_qa(&q, &resp("[5, 5]")), 1.0);
        assert!((score_qa(&q, &resp("[2.5, 5]")) - 0.577_350_269).abs() < 1e-6);
        assert_eq!(score_qa(&q, &resp("[50, 50]")), 0.0);
        assert_eq!(score_qa(&q, &resp("somewhere")), 0.0);
    }

    #[test]
    fn paired_scoring() {
        let a = qa("y-n", TaskKind::Yaw, &DIRS, "North", Some("y"));
        let b = qa("y-s", TaskKind::Yaw, &DIRS, "South", Some("y"));
        assert_eq!(score_paired(&a, &b, &resp("North"), &resp("South"), PairingMode::Paired).unwrap(), vec![1.0]);
        assert_eq!(score_paired(&a, &b, &resp("North"), &resp("North"), PairingMode::Paired).unwrap(), vec![0.0]);
        assert_eq!(
            score_paired(&a, &b, &resp("North"), &resp("North"), PairingMode::Independent).unwrap(),
            vec![1.0, 0.0]
        );
        let c = qa("z", TaskKind::Yaw, &DIRS, "North", Some("other"));
        assert!(score_paired(&a, &c, &resp("North"), &resp("North"), PairingMode::Paired).is_err());
    }

    #[test]
    fn table2_rows() {
        for (row, want) in [
            ([6.27, 3.81, 27.68, 17.84, 14.81, 10.49], 13.48),
            ([20.97, 44.81, 69.84, 49.30, 51.35, 8.54], 40.80),
            ([5.73, 1.12, 34.27, 8.76, 11.57, 11.89], 12.22),
        ] {
            assert!((round2(overall_score(row)) - want).abs() < 0.005);
        }
        assert_eq!(overall_score([0.0; 6]), 0.0);
    }

    #[test]
    fn aggregate_counts_missing_as_zero() {
        let m = BenchmarkManifest::new(
            "val".into(),
            0,
            "h".into(),
            vec![
                qa("y-n", TaskKind::Yaw, &DIRS, "North", Some("y")),
                qa("y-s", TaskKind::Yaw, &DIRS, "South", Some("y")),
                qa("d", TaskKind::Depth, &["a", "b", "c"], "a", None),
                qa("d2", TaskKind::Depth, &["a", "b", "c"], "a", None),
            ],
        );
        let scores = HashMap::from([("y-n".to_string(), 1.0), ("y-s".to_string(), 1.0), ("d".to_string(), 1.0)]);
        let r = aggregate(&scores, &m, PairingMode::Paired);
        assert_eq!(r.per_task[&TaskKind::Yaw], TaskScore { score: 100.0, count: 1 });
        assert_eq!(r.per_task[&TaskKind::Depth], TaskScore { score: 50.0, count: 2 });
        assert_eq!(r.overall, 75.0);
        let r = aggregate(&scores, &m, PairingMode::Independent);
        assert_eq!(r.per_task[&TaskKind::Yaw].count, 2);
        assert!(r.to_jsonl().contains("\"record\":\"overall\""));
        assert!(r.table().contains("Depth"));
    }

    #[test]
    fn responses_file() {
        let text = "{\"qa_id\":\"a\",\"response\":\"x\"}\n\n{\"qa_id\":\"b\",\"response\":\"y\"}\n";
        let m = read_responses(text.as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        let dup = "{\"qa_id\":\"a\",\"response\":\"x\"}\n{\"qa_id\":\"a\",\"response\":\"y\"}\n";
        assert!(matches!(read_responses(dup.as_bytes()), Err(ResponseFileError::Duplicate(_))));
        assert!(matches!(read_responses("{".as_bytes()), Err(ResponseFileError::Line { line: 1, .. })));
    }
}
