//! Benchmark manifest: a header record followed by one QaPair per line.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{QaPair, TaskKind};

pub const MANIFEST_FORMAT: &str = "spatialvqa.manifest.v1";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("manifest is inconsistent: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    split: String,
    seed: u64,
    config_hash: String,
    task_counts: BTreeMap<TaskKind, usize>,
    total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkManifest {
    pub split: String,
    pub seed: u64,
    pub config_hash: String,
    /// Records per task (a paired question counts twice).
    pub task_counts: BTreeMap<TaskKind, usize>,
    pub qa: Vec<QaPair>,
}

impl BenchmarkManifest {
    pub fn new(split: String, seed: u64, config_hash: String, qa: Vec<QaPair>) -> Self {
        let mut task_counts: BTreeMap<TaskKind, usize> = TaskKind::ALL.into_iter().map(|k| (k, 0)).collect();
        for q in &qa {
            *task_counts.entry(q.task).or_insert(0) += 1;
        }
        Self { split, seed, config_hash, task_counts, qa }
    }

    pub fn total(&self) -> usize {
        self.qa.len()
    }

    pub fn index(&self) -> HashMap<&str, &QaPair> {
        self.qa.iter().map(|q| (q.qa_id.as_str(), q)).collect()
    }

    /// Number of questions per task, counting each pair once.
    pub fn question_counts(&self) -> BTreeMap<TaskKind, usize> {
        let mut seen = HashSet::new();
        let mut out: BTreeMap<TaskKind, usize> = TaskKind::ALL.into_iter().map(|k| (k, 0)).collect();
        for q in &self.qa {
            let key = q.pair_id.as_deref().unwrap_or(&q.qa_id);
            if seen.insert((q.task, key)) {
                *out.entry(q.task).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let sum: usize = self.task_counts.values().sum();
        if sum != self.qa.len() {
            return Err(ManifestError::Invalid(format!("task counts sum to {sum}, {} records", self.qa.len())));
        }
        let mut ids = HashSet::new();
        let mut per_task: BTreeMap<TaskKind, usize> = BTreeMap::new();
        let mut pairs: HashMap<&str, &QaPair> = HashMap::new();
        for q in &self.qa {
            if !ids.insert(q.qa_id.as_str()) {
                return Err(ManifestError::Invalid(format!("duplicate qa_id {}", q.qa_id)));
            }
            q.check().map_err(ManifestError::Invalid)?;
            *per_task.entry(q.task).or_insert(0) += 1;
            if let Some(p) = &q.pair_id {
                if let Some(first) = pairs.get(p.as_str()) {
                    if first.image != q.image || first.task != q.task {
                        return Err(ManifestError::Invalid(format!("pair {p} spans different images or tasks")));
                    }
                } else {
                    pairs.insert(p, q);
                }
            }
        }
        for (task, n) in &self.task_counts {
            if per_task.get(task).copied().unwrap_or(0) != *n {
                return Err(ManifestError::Invalid(format!("header says {n} {task} records")));
            }
        }
        Ok(())
    }

    pub fn to_writer(&self, mut w: impl Write) -> io::Result<()> {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            split: self.split.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            task_counts: self.task_counts.clone(),
            total: self.qa.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for q in &self.qa {
            writeln!(w, "{}", serde_json::to_string(q)?)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.to_writer(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn from_reader(r: impl BufRead) -> Result<Self, ManifestError> {
        let mut header: Option<Header> = None;
        let mut qa = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| ManifestError::Line { line: line_no, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |e: serde_json::Error| ManifestError::Line { line: line_no, message: e.to_string() };
            match &header {
                None => {
                    let h: Header = serde_json::from_str(&line).map_err(bad)?;
                    if h.format != MANIFEST_FORMAT {
                        return Err(ManifestError::Line {
                            line: line_no,
                            message: format!("unsupported format {:?}", h.format),
                        });
                    }
                    header = Some(h);
                }
                Some(_) => qa.push(serde_json::from_str::<QaPair>(&line).map_err(bad)?),
            }
        }
        let h = header.ok_or(ManifestError::Line { line: 1, message: "missing header record".into() })?;
        if h.total != qa.len() {
            return Err(ManifestError::Invalid(format!("header total {} but {} records", h.total, qa.len())));
        }
        let m = Self { split: h.split, seed: h.seed, config_hash: h.config_hash, task_counts: h.task_counts, qa };
        m.validate()?;
        Ok(m)
    }
}

pub fn write_manifest(m: &BenchmarkManifest, path: &Path) -> Result<(), ManifestError> {
    let io_err = |source| ManifestError::Io { path: path.display().to_string(), source };
    let f = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(f);
    m.to_writer(&mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_manifest(path: &Path) -> Result<BenchmarkManifest, ManifestError> {
    let f = File::open(path).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
    BenchmarkManifest::from_reader(BufReader::new(f))
}
