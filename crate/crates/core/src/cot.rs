//! Four-stage chain-of-thought data generation: reflect on sampled QA pairs,
//! distill reasoning rules, generate rule-guided traces for known answers,
//! then let the model validate and correct its own traces.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatModel, ChatRequest, ClientError, InFlightLimiter};
use crate::prompt;
use crate::response::{normalize_answer, normalize_gt, parse_response, Defect};
use crate::taskgen::{record_rng, BenchmarkManifest, QaPair, TaskKind};

pub const REPROMPT_SUFFIX: &str =
    "Your previous reply did not follow the required format. Reply again using exactly the format requested above.";

#[derive(Debug, Error)]
pub enum CotError {
    #[error("reflection needs at least one QA pair")]
    NoSamples,
    #[error("manifest has no QA pairs")]
    EmptyManifest,
    #[error("no traces to distill for task {0}")]
    NoTraces(TaskKind),
    #[error("summarizer output for {task} has no \"Step k:\" rules after a reprompt")]
    RuleGrammar { task: TaskKind, output: String },
    #[error("model call failed: {0}")]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub qa_id: String,
    pub task: TaskKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub qa_id: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningRuleSet {
    pub task: TaskKind,
    /// Each entry starts with "Step k:".
    pub rules: Vec<String>,
    pub source_trace_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validation {
    Valid,
    Invalid,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CotDefect {
    /// Generator output lacked think/answer sections after a reprompt.
    Unparseable,
    EmptyThink,
    AnswerMismatch,
    /// The validator tried to change the answer; its edit was discarded.
    ValidatorChangedAnswer,
    /// Validator output could not be read; the sample is kept as is.
    ValidatorUnparseable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotSample {
    pub qa_id: String,
    pub task: TaskKind,
    pub prompt: String,
    pub think: String,
    pub answer: String,
    pub validation: Validation,
    pub corrected: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defects: Vec<CotDefect>,
}

/// Line-delimited dataset record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRecord {
    pub qa_id: String,
    pub prompt: String,
    pub think: String,
    pub answer: String,
    pub validation: Validation,
    pub corrected: bool,
}

impl From<&CotSample> for CotRecord {
    fn from(s: &CotSample) -> Self {
        Self {
            qa_id: s.qa_id.clone(),
            prompt: s.prompt.clone(),
            think: s.think.clone(),
            answer: s.answer.clone(),
            validation: s.validation,
            corrected: s.corrected,
        }
    }
}

fn with_image(req: ChatRequest, qa: &QaPair, attach: bool) -> ChatRequest {
    if attach && !qa.image.path.is_empty() {
        req.with_image(qa.image.path.clone())
    } else {
        req
    }
}

fn reprompted(req: &ChatRequest) -> ChatRequest {
    let mut r = req.clone();
    if let Some(last) = r.messages.last_mut() {
        last.content = format!("{}\n\n{REPROMPT_SUFFIX}", last.content);
    }
    r
}

/// Runs `f` over `items`, at most `limit` at a time, preserving order.
fn bounded_map<T: Sync, R: Send>(items: &[T], limit: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if limit <= 1 {
        return items.iter().map(f).collect();
    }
    let limiter = InFlightLimiter::new(limit);
    items
        .par_iter()
        .map(|it| {
            let _permit = limiter.acquire();
            f(it)
        })
        .collect()
}

pub fn reflect_request(qa: &QaPair, attach_image: bool) -> ChatRequest {
    let text = prompt::render(prompt::COT_REFLECT, &[("task", qa.prompt.trim_end()), ("answer", &qa.gt_answer)]);
    with_image(ChatRequest::user(text), qa, attach_image)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReflectOutput {
    pub traces: Vec<Trace>,
    pub skipped: Vec<SkipRecord>,
}

/// One trace per sampled pair; failed or empty replies are skipped and recorded.
pub fn reflect(
    sampled: &[&QaPair],
    reasoner: &dyn ChatModel,
    attach_image: bool,
    max_in_flight: usize,
) -> Result<ReflectOutput, CotError> {
    if sampled.is_empty() {
        return Err(CotError::NoSamples);
    }
    let results = bounded_map(sampled, max_in_flight, |qa| reasoner.complete(&reflect_request(qa, attach_image)));
    let mut out = ReflectOutput::default();
    for (qa, res) in sampled.iter().zip(results) {
        match res {
            Ok(r) if !r.text.trim().is_empty() => {
                out.traces.push(Trace { qa_id: qa.qa_id.clone(), task: qa.task, text: r.text.trim().to_string() })
            }
            Ok(_) => out.skipped.push(SkipRecord {
                qa_id: qa.qa_id.clone(),
                stage: "reflect".into(),
                reason: "empty reply".into(),
            }),
            Err(e) => out.skipped.push(SkipRecord {
                qa_id: qa.qa_id.clone(),
                stage: "reflect".into(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

static STEP_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^\s*(?:[-*\u{2022}]\s*)?(Step\s+\d+\s*:.*\S)\s*$").expect("step regex"));

/// "Step k: ..." lines, bullet markers removed, text otherwise verbatim.
pub fn parse_rules(text: &str) -> Vec<String> {
    STEP_RE.captures_iter(text).map(|c| c[1].to_string()).collect()
}

pub fn summarize_request(traces: &[&Trace]) -> ChatRequest {
    let examples: Vec<String> =
        traces.iter().enumerate().map(|(i, t)| format!("Example {}:\n{}", i + 1, t.text)).collect();
    ChatRequest::user(prompt::render(prompt::COT_SUMMARIZE, &[("examples", &examples.join("\n\n"))]))
}

/// Distills the traces of one task into rules. One reprompt on a grammar
/// failure, then an error.
pub fn distill_rules(task: TaskKind, traces: &[&Trace], summarizer: &dyn ChatModel) -> Result<ReasoningRuleSet, CotError> {
    if traces.is_empty() {
        return Err(CotError::NoTraces(task));
    }
    let req = summarize_request(traces);
    let mut reply = summarizer.complete(&req)?.text;
    let mut rules = parse_rules(&reply);
    if rules.is_empty() {
        reply = summarizer.complete(&reprompted(&req))?.text;
        rules = parse_rules(&reply);
    }
    if rules.is_empty() {
        return Err(CotError::RuleGrammar { task, output: reply });
    }
    Ok(ReasoningRuleSet { task, rules, source_trace_ids: traces.iter().map(|t| t.qa_id.clone()).collect() })
}

pub fn generate_request(qa: &QaPair, rules: &ReasoningRuleSet, attach_image: bool) -> ChatRequest {
    let text = prompt::render(
        prompt::COT_GENERATE,
        &[("rules", &rules.rules.join("\n")), ("question", qa.prompt.trim_end()), ("answer", &qa.gt_answer)],
    );
    with_image(ChatRequest::user(text), qa, attach_image)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub qa_id: String,
    pub defect: CotDefect,
    pub detail: String,
}

fn answers_match(qa: &QaPair, answer: &str) -> bool {
    normalize_answer(answer, qa.task, &qa.options).same_as(&normalize_gt(&qa.gt_answer, qa.task))
}

/// Rule-guided trace for a known answer. The emitted answer is always the
/// ground truth; a generator that argues for anything else is rejected.
pub fn generate_cot(
    qa: &QaPair,
    rules: &ReasoningRuleSet,
    generator: &dyn ChatModel,
    attach_image: bool,
) -> Result<Result<CotSample, Rejection>, ClientError> {
    let req = generate_request(qa, rules, attach_image);
    let mut parsed = parse_response(&generator.complete(&req)?.text, false);
    let missing = |p: &crate::response::ParsedResponse| {
        p.defects.iter().any(|d| matches!(d, Defect::MissingThink | Defect::MissingAnswer))
    };
    if missing(&parsed) {
        parsed = parse_response(&generator.complete(&reprompted(&req))?.text, false);
    }
    let reject = |defect, detail: String| Ok(Err(Rejection { qa_id: qa.qa_id.clone(), defect, detail }));
    if missing(&parsed) {
        return reject(CotDefect::Unparseable, format!("{:?}", parsed.defects));
    }
    if parsed.think.trim().is_empty() {
        return reject(CotDefect::EmptyThink, String::new());
    }
    if !answers_match(qa, &parsed.answer) {
        return reject(CotDefect::AnswerMismatch, parsed.answer);
    }
    Ok(Ok(CotSample {
        qa_id: qa.qa_id.clone(),
        task: qa.task,
        prompt: qa.model_prompt(false),
        think: parsed.think,
        answer: qa.gt_answer.clone(),
        validation: Validation::Unknown,
        corrected: false,
        defects: Vec::new(),
    }))
}

pub fn validate_request(sample: &CotSample) -> ChatRequest {
    let response = format!("<think>{}</think>\n<answer>{}</answer>", sample.think, sample.answer);
    ChatRequest::user(prompt::render(prompt::COT_VALIDATE, &[("response", &response)]))
}

static VALIDATION_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?is)<\s*validation\s*>\s*(.*?)\s*<\s*/\s*validation\s*>").expect("validation regex")
});

fn parse_validation(text: &str) -> Validation {
    let Some(c) = VALIDATION_RE.captures(text) else {
        return Validation::Unknown;
    };
    let v = c[1].trim().trim_matches(|ch: char| !ch.is_alphanumeric()).to_ascii_lowercase();
    match v.as_str() {
        "valid" => Validation::Valid,
        "invalid" => Validation::Invalid,
        _ => Validation::Unknown,
    }
}

/// Records the validator's verdict and adopts its revised trace when the
/// answer is left unchanged. The answer itself never changes here.
pub fn validate_and_correct(
    sample: &CotSample,
    qa: &QaPair,
    validator: &dyn ChatModel,
) -> Result<CotSample, ClientError> {
    let reply = validator.complete(&validate_request(sample))?.text;
    let mut out = sample.clone();
    out.validation = parse_validation(&reply);
    let parsed = parse_response(&reply, false);
    let readable = !parsed.defects.iter().any(|d| matches!(d, Defect::MissingThink | Defect::MissingAnswer));
    if out.validation == Validation::Unknown || !readable {
        out.defects.push(CotDefect::ValidatorUnparseable);
        if !readable {
            return Ok(out);
        }
    }
    if !answers_match(qa, &parsed.answer) {
        out.defects.push(CotDefect::ValidatorChangedAnswer);
        return Ok(out);
    }
    if !parsed.think.is_empty() && parsed.think != sample.think {
        out.think = parsed.think;
        out.corrected = true;
    }
    debug_assert_eq!(out.answer, sample.answer);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CotConfig {
    /// Reflection samples per task (or in total when rules are shared).
    pub k: usize,
    pub per_task_rules: bool,
    pub attach_images: bool,
    pub max_in_flight: usize,
}

impl Default for CotConfig {
    fn default() -> Self {
        Self { k: 20, per_task_rules: true, attach_images: true, max_in_flight: 4 }
    }
}

pub struct CotClients<'a> {
    pub reasoner: &'a dyn ChatModel,
    pub summarizer: &'a dyn ChatModel,
    pub generator: &'a dyn ChatModel,
    pub validator: &'a dyn ChatModel,
}

impl<'a> CotClients<'a> {
    /// One model for every role.
    pub fn single(model: &'a dyn ChatModel) -> Self {
        Self { reasoner: model, summarizer: model, generator: model, validator: model }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CotReport {
    pub seed: u64,
    pub k: usize,
    pub manifest_records: usize,
    pub reflect_sampled: usize,
    pub reflect_traces: usize,
    pub reflect_skipped: Vec<SkipRecord>,
    /// Rule count per rule set ("shared" when rules are not per task).
    pub rule_sets: BTreeMap<String, usize>,
    pub stage_errors: Vec<String>,
    pub generation_input: usize,
    pub generation_rejected: Vec<Rejection>,
    /// Records whose task had no rule set.
    pub generation_skipped: usize,
    pub generation_failed: Vec<SkipRecord>,
    pub validated_valid: usize,
    pub validated_invalid: usize,
    pub validated_unknown: usize,
    pub corrected: usize,
    pub answer_change_attempts: usize,
    pub emitted: usize,
}

impl CotReport {
    /// Every manifest record is accounted for exactly once.
    pub fn telescopes(&self) -> bool {
        self.generation_input == self.manifest_records
            && self.generation_rejected.len() + self.generation_skipped + self.generation_failed.len() + self.emitted
                == self.generation_input
            && self.validated_valid + self.validated_invalid + self.validated_unknown == self.emitted
            && self.reflect_traces + self.reflect_skipped.len() == self.reflect_sampled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRun {
    pub samples: Vec<CotSample>,
    pub rules: Vec<ReasoningRuleSet>,
    pub report: CotReport,
}

impl CotRun {
    pub fn dataset_jsonl(&self) -> String {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &self.samples).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }
}

pub fn write_dataset(mut w: impl Write, samples: &[CotSample]) -> io::Result<()> {
    for s in samples {
        writeln!(w, "{}", serde_json::to_string(&CotRecord::from(s))?)?;
    }
    Ok(())
}

fn rule_key(task: TaskKind, per_task: bool) -> String {
    if per_task {
        task.as_str().to_string()
    } else {
        "shared".to_string()
    }
}

/// Deterministic reflection sample: a seeded shuffle of qa_ids per group.
pub fn sample_for_reflection<'m>(manifest: &'m BenchmarkManifest, cfg: &CotConfig, seed: u64) -> Vec<&'m QaPair> {
    let mut groups: BTreeMap<String, Vec<&QaPair>> = BTreeMap::new();
    for q in &manifest.qa {
        groups.entry(rule_key(q.task, cfg.per_task_rules)).or_default().push(q);
    }
    let mut out = Vec::new();
    for (key, mut g) in groups {
        g.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));
        g.shuffle(&mut record_rng(seed, &format!("cot/reflect/{key}")));
        out.extend(g.into_iter().take(cfg.k));
    }
    out
}

pub fn run_cot_pipeline(
    manifest: &BenchmarkManifest,
    clients: &CotClients,
    cfg: &CotConfig,
    seed: u64,
) -> Result<CotRun, CotError> {
    if manifest.qa.is_empty() {
        return Err(CotError::EmptyManifest);
    }
    let mut report = CotReport { seed, k: cfg.k, manifest_records: manifest.qa.len(), ..Default::default() };

    let sampled = sample_for_reflection(manifest, cfg, seed);
    report.reflect_sampled = sampled.len();
    let reflected = reflect(&sampled, clients.reasoner, cfg.attach_images, cfg.max_in_flight)?;
    report.reflect_traces = reflected.traces.len();
    report.reflect_skipped = reflected.skipped;

    let mut by_key: BTreeMap<String, Vec<&Trace>> = BTreeMap::new();
    for t in &reflected.traces {
        by_key.entry(rule_key(t.task, cfg.per_task_rules)).or_default().push(t);
    }
    let mut rules: BTreeMap<String, ReasoningRuleSet> = BTreeMap::new();
    for (key, traces) in &by_key {
        let task = traces[0].task;
        match distill_rules(task, traces, clients.summarizer) {
            Ok(set) => {
                report.rule_sets.insert(key.clone(), set.rules.len());
                rules.insert(key.clone(), set);
            }
            Err(e) => report.stage_errors.push(format!("distill {key}: {e}")),
        }
    }

    report.generation_input = manifest.qa.len();
    let jobs: Vec<(&QaPair, Option<&ReasoningRuleSet>)> =
        manifest.qa.iter().map(|q| (q, rules.get(&rule_key(q.task, cfg.per_task_rules)))).collect();
    let results = bounded_map(&jobs, cfg.max_in_flight, |(qa, set)| {
        let set = (*set)?;
        Some(generate_cot(qa, set, clients.generator, cfg.attach_images).map(|r| {
            r.map(|s| validate_and_correct(&s, qa, clients.validator).map_err(|e| (s, e)))
        }))
    });

    let mut samples = Vec::new();
    for ((qa, _), res) in jobs.iter().zip(results) {
        match res {
            None => report.generation_skipped += 1,
            Some(Err(e)) => report.generation_failed.push(SkipRecord {
                qa_id: qa.qa_id.clone(),
                stage: "generate".into(),
                reason: e.to_string(),
            }),
            Some(Ok(Err(rej))) => report.generation_rejected.push(rej),
            Some(Ok(Ok(validated))) => {
                let sample = match validated {
                    Ok(s) => s,
                    // validator unreachable: keep the trace, verdict unknown
                    Err((mut s, e)) => {
                        report.stage_errors.push(format!("validate {}: {e}", qa.qa_id));
                        s.defects.push(CotDefect::ValidatorUnparseable);
                        s
                    }
                };
                match sample.validation {
                    Validation::Valid => report.validated_valid += 1,
                    Validation::Invalid => report.validated_invalid += 1,
                    Validation::Unknown => report.validated_unknown += 1,
                }
                report.corrected += usize::from(sample.corrected);
                report.answer_change_attempts +=
                    usize::from(sample.defects.contains(&CotDefect::ValidatorChangedAnswer));
                assert_eq!(sample.answer, qa.gt_answer, "emitted answers always equal the ground truth");
                samples.push(sample);
            }
        }
    }
    report.emitted = samples.len();
    Ok(CotRun { samples, rules: rules.into_values().collect(), report })
}
