//! Parsing of structured model replies (`<location>`, `<think>`, `<answer>`)
//! and answer normalization against a question's options.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::scene::BBox2D;
use crate::taskgen::{parse_pixel_pair, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Defect {
    MissingLocation,
    MissingThink,
    MissingAnswer,
    OutOfOrder,
    MalformedBox,
    EmptyAnswer,
    DuplicateTag,
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::MissingLocation => "missing-location",
            Self::MissingThink => "missing-think",
            Self::MissingAnswer => "missing-answer",
            Self::OutOfOrder => "out-of-order",
            Self::MalformedBox => "malformed-box",
            Self::EmptyAnswer => "empty-answer",
            Self::DuplicateTag => "duplicate-tag",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub locations: Vec<Location>,
    pub think: String,
    /// Trimmed text of the answer section; empty when absent.
    pub answer: String,
    pub well_formed: bool,
    pub defects: Vec<Defect>,
    /// Tags appear exactly as `<tag>`/`</tag>`, lowercase, in canonical order,
    /// with nothing but whitespace between sections.
    pub canonical: bool,
}

impl ParsedResponse {
    /// Strict mode additionally requires the canonical spelling.
    pub fn is_well_formed(&self, strict: bool) -> bool {
        self.well_formed && (!strict || self.canonical)
    }

    /// Canonical text for this response. Parsing the result yields the same
    /// response whenever `self` is well formed.
    pub fn emit(&self, with_location: bool) -> String {
        let mut out = String::new();
        if with_location || !self.locations.is_empty() {
            let entries: Vec<String> = self
                .locations
                .iter()
                .map(|l| {
                    let [a, b, c, d] = l.bbox.to_array();
                    format!("[{}]: [{a}, {b}, {c}, {d}]", l.label)
                })
                .collect();
            out.push_str(&format!("<location>[{}]</location>\n", entries.join(", ")));
        }
        out.push_str(&format!("<think>{}</think>\n<answer>{}</answer>", self.think, self.answer));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Location,
    Think,
    Answer,
}

struct TagToken {
    tag: Tag,
    closing: bool,
    start: usize,
    end: usize,
    canonical: bool,
}

static TAG_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)<\s*(/?)\s*(location|think|answer)\s*>").expect("tag regex"));

// `[label]: [n, n, n, n]` with the label brackets optional.
static ENTRY_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:\[\s*([^\[\]]*?)\s*\]|([^\[\]:,]+?))\s*:\s*\[([^\[\]]*)\]").expect("entry regex")
});

fn tokens(text: &str) -> Vec<TagToken> {
    TAG_RE
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).expect("whole match");
            let name = c[2].to_ascii_lowercase();
            let tag = match name.as_str() {
                "location" => Tag::Location,
                "think" => Tag::Think,
                _ => Tag::Answer,
            };
            let closing = !c[1].is_empty();
            let canonical = m.as_str() == format!("<{}{}>", if closing { "/" } else { "" }, name);
            TagToken { tag, closing, start: m.start(), end: m.end(), canonical }
        })
        .collect()
}

/// Byte span of the content between the first opening tag and the first
/// closing tag after it.
fn section(toks: &[TagToken], tag: Tag) -> (Option<(usize, usize, usize, usize)>, bool) {
    let opens: Vec<&TagToken> = toks.iter().filter(|t| t.tag == tag && !t.closing).collect();
    let closes: Vec<&TagToken> = toks.iter().filter(|t| t.tag == tag && t.closing).collect();
    let duplicate = opens.len() > 1 || closes.len() > 1;
    let span = opens.first().and_then(|o| {
        closes.iter().find(|c| c.start >= o.end).map(|c| (o.start, o.end, c.start, c.end))
    });
    (span, duplicate)
}

fn parse_locations(content: &str, defects: &mut Vec<Defect>) -> Vec<Location> {
    let mut out = Vec::new();
    let mut malformed = false;
    let mut leftover = String::new();
    let mut last = 0;
    for c in ENTRY_RE.captures_iter(content) {
        let m = c.get(0).expect("whole match");
        leftover.push_str(&content[last..m.start()]);
        last = m.end();
        let label = c.get(1).or(c.get(2)).map(|l| l.as_str().trim()).unwrap_or("");
        let nums: Vec<Option<f64>> = c[3].split(',').map(|n| n.trim().parse::<f64>().ok()).collect();
        let bbox = match nums.as_slice() {
            [Some(a), Some(b), Some(x), Some(y)] => BBox2D::new(*a, *b, *x, *y).ok(),
            _ => None,
        };
        match bbox {
            Some(bbox) if !label.is_empty() => out.push(Location { label: label.to_string(), bbox }),
            _ => malformed = true,
        }
    }
    leftover.push_str(&content[last..]);
    // anything but list punctuation left over is an entry we could not read
    if leftover.chars().any(|ch| !(ch.is_whitespace() || matches!(ch, '[' | ']' | ',' | ';'))) {
        malformed = true;
    }
    if malformed {
        defects.push(Defect::MalformedBox);
    }
    out
}

/// Total over arbitrary text; problems are reported as defects.
pub fn parse_response(text: &str, expects_location: bool) -> ParsedResponse {
    let toks = tokens(text);
    let mut defects = Vec::new();

    let (loc, dup_l) = section(&toks, Tag::Location);
    let (think, dup_t) = section(&toks, Tag::Think);
    let (answer, dup_a) = section(&toks, Tag::Answer);

    if expects_location && loc.is_none() {
        defects.push(Defect::MissingLocation);
    }
    if think.is_none() {
        defects.push(Defect::MissingThink);
    }
    if answer.is_none() {
        defects.push(Defect::MissingAnswer);
    }
    if dup_l || dup_t || dup_a {
        defects.push(Defect::DuplicateTag);
    }

    let present: Vec<(usize, usize, usize, usize)> = [loc, think, answer].into_iter().flatten().collect();
    if present.windows(2).any(|w| w[0].3 > w[1].0) {
        defects.push(Defect::OutOfOrder);
    }

    let locations = match loc {
        Some((_, s, e, _)) => parse_locations(&text[s..e], &mut defects),
        None => Vec::new(),
    };
    let think_text = think.map(|(_, s, e, _)| text[s..e].trim().to_string()).unwrap_or_default();
    let answer_text = answer.map(|(_, s, e, _)| text[s..e].trim().to_string()).unwrap_or_default();
    if answer.is_some() && answer_text.is_empty() {
        defects.push(Defect::EmptyAnswer);
    }
    defects.sort();
    defects.dedup();

    let outside_ok = {
        let mut spans = present.clone();
        spans.sort();
        let mut cursor = 0;
        let mut ok = true;
        for (os, _, _, ce) in &spans {
            if *os < cursor || !text[cursor..*os].trim().is_empty() {
                ok = false;
                break;
            }
            cursor = *ce;
        }
        ok && text.get(cursor..).is_some_and(|t| t.trim().is_empty())
    };
    let canonical = defects.is_empty() && outside_ok && toks.iter().all(|t| t.canonical) && toks.len() == present.len() * 2;

    ParsedResponse {
        locations,
        think: think_text,
        answer: answer_text,
        well_formed: defects.is_empty(),
        defects,
        canonical,
    }
}

/// An answer mapped into the question's answer space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizedAnswer {
    /// The option text, exactly as listed in the question.
    Option(String),
    Pixel(f64, f64),
    /// Never equal to any ground truth.
    Unmatched,
}

impl NormalizedAnswer {
    pub fn as_option(&self) -> Option<&str> {
        match self {
            Self::Option(s) => Some(s),
            _ => None,
        }
    }

    /// Same answer space point. `Unmatched` never matches anything.
    pub fn same_as(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::Option(a), Self::Option(b)) => a == b,
            (Self::Pixel(a, b), Self::Pixel(c, d)) => a == c && b == d,
            _ => false,
        }
    }
}

static WORD_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[0-9]+(?:\.[0-9]+)?|[^\W_]+").expect("word regex"));
static PIXEL_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[\[(]\s*(-?[0-9]+(?:\.[0-9]+)?)\s*,\s*(-?[0-9]+(?:\.[0-9]+)?)\s*[\])]").expect("pixel regex")
});

fn words(s: &str) -> Vec<String> {
    WORD_RE.find_iter(&s.to_lowercase()).map(|m| m.as_str().to_string()).collect()
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Exact (case-insensitive, whitespace-collapsed) match first, then an option
/// whose word sequence occurs in the answer, if exactly one does.
pub fn normalize_answer(raw: &str, task: TaskKind, options: &[String]) -> NormalizedAnswer {
    if task == TaskKind::Pixel {
        if let Some((x, y)) = parse_pixel_pair(raw) {
            return NormalizedAnswer::Pixel(x, y);
        }
        return match PIXEL_RE.captures(raw) {
            Some(c) => match (c[1].parse(), c[2].parse()) {
                (Ok(x), Ok(y)) => NormalizedAnswer::Pixel(x, y),
                _ => NormalizedAnswer::Unmatched,
            },
            None => NormalizedAnswer::Unmatched,
        };
    }
    let collapse = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let key = collapse(raw);
    if key.is_empty() {
        return NormalizedAnswer::Unmatched;
    }
    let trimmed = key.trim_end_matches(['.', '!']);
    if let Some(o) = options.iter().find(|o| {
        let ok = collapse(o);
        ok == key || ok == trimmed
    }) {
        return NormalizedAnswer::Option(o.clone());
    }
    let hay = words(raw);
    let hits: Vec<&String> = options.iter().filter(|o| contains_run(&hay, &words(o))).collect();
    match hits.as_slice() {
        [one] => NormalizedAnswer::Option((*one).clone()),
        _ => NormalizedAnswer::Unmatched,
    }
}

/// Canonical ground truth in the same space as [`normalize_answer`].
pub fn normalize_gt(gt: &str, task: TaskKind) -> NormalizedAnswer {
    if task == TaskKind::Pixel {
        return match parse_pixel_pair(gt) {
            Some((x, y)) => NormalizedAnswer::Pixel(x, y),
            None => NormalizedAnswer::Unmatched,
        };
    }
    NormalizedAnswer::Option(gt.to_string())
}
