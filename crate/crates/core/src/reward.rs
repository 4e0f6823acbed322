//! GRPO reward channels: format, location, accuracy and trace-only logic.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{ChatModel, ChatRequest, ClientError, Decoding};
use crate::geometry::{centerness, iou};
use crate::prompt;
use crate::response::{normalize_answer, parse_response, NormalizedAnswer, ParsedResponse};
use crate::scoring::score_normalized;
use crate::taskgen::{QaPair, TaskKind};

pub const ENGINE_VERSION: &str = concat!("spatialvqa-reward/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSet {
    #[default]
    ZeroOne,
    NegOneOne,
}

impl ValueSet {
    pub fn low(self) -> f64 {
        match self {
            Self::ZeroOne => 0.0,
            Self::NegOneOne => -1.0,
        }
    }

    pub fn high(self) -> f64 {
        1.0
    }

    pub fn value(self, hit: bool) -> f64 {
        if hit {
            self.high()
        } else {
            self.low()
        }
    }
}

/// What to do when the logic verifier cannot be reached.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierErrorPolicy {
    #[default]
    Propagate,
    RecordLow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub iou_threshold: f64,
    pub value_set: ValueSet,
    pub strict_format: bool,
    pub location_enabled: bool,
    pub logic_enabled: bool,
    /// Pixel answers count as correct when centerness exceeds this.
    pub pixel_centerness_threshold: f64,
    pub verifier_decoding: Decoding,
    pub on_verifier_error: VerifierErrorPolicy,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            value_set: ValueSet::ZeroOne,
            strict_format: false,
            location_enabled: true,
            logic_enabled: true,
            pixel_centerness_threshold: 0.5,
            verifier_decoding: Decoding::default(),
            on_verifier_error: VerifierErrorPolicy::Propagate,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(RewardError::Config(format!("iou_threshold must be in (0,1), got {}", self.iou_threshold)));
        }
        if !(0.0..1.0).contains(&self.pixel_centerness_threshold) {
            return Err(RewardError::Config(format!(
                "pixel_centerness_threshold must be in [0,1), got {}",
                self.pixel_centerness_threshold
            )));
        }
        Ok(())
    }

    /// First 16 hex chars of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("invalid reward config: {0}")]
    Config(String),
    #[error("logic reward is enabled but no verifier was supplied")]
    NoVerifier,
    #[error("logic verifier failed: {0}")]
    Verifier(#[from] ClientError),
    #[error("empty rollout group")]
    EmptyGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Format,
    Location,
    Accuracy,
    Logic,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Format => "format",
            Self::Location => "location",
            Self::Accuracy => "accuracy",
            Self::Logic => "logic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub format: f64,
    pub location: f64,
    pub accuracy: f64,
    pub logic: f64,
    pub total: f64,
    /// Disabled channels; they hold the value-set low.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absent: Vec<Channel>,
}

impl RewardVector {
    pub fn channels(&self) -> [(Channel, f64); 4] {
        [
            (Channel::Format, self.format),
            (Channel::Location, self.location),
            (Channel::Accuracy, self.accuracy),
            (Channel::Logic, self.logic),
        ]
    }

    /// High/low pattern, independent of the value set.
    pub fn pattern(&self) -> [bool; 4] {
        self.channels().map(|(_, v)| v > 0.0)
    }
}

pub fn format_reward(resp: &ParsedResponse, cfg: &RewardConfig) -> f64 {
    cfg.value_set.value(resp.is_well_formed(cfg.strict_format))
}

/// Label of a reported box mapped onto one of the ground-truth descriptions.
fn label_target<'a>(label: &str, descriptions: &'a [String]) -> Option<&'a str> {
    let opts: Vec<String> = descriptions.to_vec();
    match normalize_answer(label, TaskKind::Distance, &opts) {
        NormalizedAnswer::Option(o) => descriptions.iter().find(|d| **d == o).map(String::as_str),
        _ => None,
    }
}

/// True iff every queried object has a reported box with IoU strictly above
/// the threshold. Boxes are taken from entries whose label maps onto the
/// object's description, or from all entries when none does.
pub fn location_hit(resp: &ParsedResponse, qa: &QaPair, cfg: &RewardConfig) -> bool {
    if resp.locations.is_empty() || qa.gt_boxes.is_empty() {
        return false;
    }
    let descriptions: Vec<String> = qa.gt_boxes.keys().cloned().collect();
    let targets: Vec<Option<&str>> = resp.locations.iter().map(|l| label_target(&l.label, &descriptions)).collect();
    qa.gt_boxes.iter().all(|(desc, gt)| {
        let labelled: Vec<usize> = (0..resp.locations.len()).filter(|&i| targets[i] == Some(desc.as_str())).collect();
        let pool: Vec<usize> = if labelled.is_empty() { (0..resp.locations.len()).collect() } else { labelled };
        pool.iter().map(|&i| iou(&resp.locations[i].bbox, gt)).fold(0.0, f64::max) > cfg.iou_threshold
    })
}

pub fn location_reward(resp: &ParsedResponse, qa: &QaPair, cfg: &RewardConfig) -> f64 {
    cfg.value_set.value(location_hit(resp, qa, cfg))
}

pub fn accuracy_hit(resp: &ParsedResponse, qa: &QaPair, cfg: &RewardConfig) -> bool {
    let answer = normalize_answer(&resp.answer, qa.task, &qa.options);
    if qa.task == TaskKind::Pixel {
        return match (&answer, qa.gt_boxes.values().next()) {
            (NormalizedAnswer::Pixel(u, v), Some(b)) => centerness(*u, *v, b) > cfg.pixel_centerness_threshold,
            _ => false,
        };
    }
    score_normalized(qa, &answer) == 1.0
}

pub fn accuracy_reward(resp: &ParsedResponse, qa: &QaPair, cfg: &RewardConfig) -> f64 {
    cfg.value_set.value(accuracy_hit(resp, qa, cfg))
}

/// The verifier sees the reasoning trace and nothing else.
pub fn verifier_request(trace: &str, cfg: &RewardConfig) -> ChatRequest {
    ChatRequest::user(prompt::render(prompt::VERIFIER, &[("trace", trace)])).with_decoding(cfg.verifier_decoding)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicOutcome {
    pub hit: bool,
    /// `None` when the trace was empty and no call was made.
    pub verifier_prompt: Option<String>,
    pub verifier_answer: Option<String>,
}

pub fn logic_check(
    resp: &ParsedResponse,
    qa: &QaPair,
    verifier: &dyn ChatModel,
    cfg: &RewardConfig,
) -> Result<LogicOutcome, ClientError> {
    if resp.think.trim().is_empty() {
        return Ok(LogicOutcome { hit: false, verifier_prompt: None, verifier_answer: None });
    }
    let req = verifier_request(&resp.think, cfg);
    let prompt_text = req.prompt_text();
    let reply = verifier.complete(&req)?;
    let parsed = parse_response(&reply.text, false);
    let answer_tag_present = !parsed.defects.contains(&crate::response::Defect::MissingAnswer);
    if !answer_tag_present || parsed.answer.is_empty() {
        return Ok(LogicOutcome { hit: false, verifier_prompt: Some(prompt_text), verifier_answer: None });
    }
    let theirs = normalize_answer(&parsed.answer, qa.task, &qa.options);
    let ours = normalize_answer(&resp.answer, qa.task, &qa.options);
    Ok(LogicOutcome { hit: theirs.same_as(&ours), verifier_prompt: Some(prompt_text), verifier_answer: Some(parsed.answer) })
}

pub fn logic_reward(
    resp: &ParsedResponse,
    qa: &QaPair,
    verifier: &dyn ChatModel,
    cfg: &RewardConfig,
) -> Result<f64, ClientError> {
    logic_check(resp, qa, verifier, cfg).map(|o| cfg.value_set.value(o.hit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardDetail {
    pub rewards: RewardVector,
    pub defects: Vec<crate::response::Defect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logic: Option<LogicOutcome>,
    /// Set when the verifier failed and the policy recorded a low value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier_error: Option<String>,
}

/// Parses once and computes every enabled channel.
pub fn compute_rewards_detailed(
    qa: &QaPair,
    response_text: &str,
    verifier: Option<&dyn ChatModel>,
    cfg: &RewardConfig,
) -> Result<RewardDetail, RewardError> {
    cfg.validate()?;
    let resp = parse_response(response_text, cfg.location_enabled);
    let vs = cfg.value_set;
    let mut absent = Vec::new();

    let format = format_reward(&resp, cfg);
    let location = if cfg.location_enabled {
        location_reward(&resp, qa, cfg)
    } else {
        absent.push(Channel::Location);
        vs.low()
    };
    let accuracy = accuracy_reward(&resp, qa, cfg);
    let mut verifier_error = None;
    let mut logic_outcome = None;
    let logic = if cfg.logic_enabled {
        let verifier = verifier.ok_or(RewardError::NoVerifier)?;
        match logic_check(&resp, qa, verifier, cfg) {
            Ok(o) => {
                let v = vs.value(o.hit);
                logic_outcome = Some(o);
                v
            }
            Err(e) if cfg.on_verifier_error == VerifierErrorPolicy::RecordLow => {
                verifier_error = Some(e.to_string());
                vs.low()
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        absent.push(Channel::Logic);
        vs.low()
    };
    let total = format + location + accuracy + logic;
    Ok(RewardDetail {
        rewards: RewardVector { format, location, accuracy, logic, total, absent },
        defects: resp.defects,
        logic: logic_outcome,
        verifier_error,
    })
}

pub fn compute_rewards(
    qa: &QaPair,
    response_text: &str,
    verifier: Option<&dyn ChatModel>,
    cfg: &RewardConfig,
) -> Result<RewardVector, RewardError> {
    compute_rewards_detailed(qa, response_text, verifier, cfg).map(|d| d.rewards)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRewards {
    pub rewards: Vec<RewardVector>,
    pub mean: f64,
    /// Sample standard deviation (n - 1) of the totals; 0 for a single rollout.
    pub stdev: f64,
}

pub fn group_stats(totals: &[f64]) -> (f64, f64) {
    let n = totals.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = totals.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Rewards for G rollouts of one prompt, evaluated concurrently, returned in
/// input order.
pub fn group_rewards(
    qa: &QaPair,
    responses: &[String],
    verifier: Option<&dyn ChatModel>,
    cfg: &RewardConfig,
) -> Result<GroupRewards, RewardError> {
    if responses.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let rewards = responses
        .par_iter()
        .map(|r| compute_rewards(qa, r, verifier, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let (mean, stdev) = group_stats(&totals);
    Ok(GroupRewards { rewards, mean, stdev })
}
