use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use spatialvqa_core::client::ScriptedClient;
use spatialvqa_core::cot::{run_cot_pipeline, CotClients, CotConfig};
use spatialvqa_core::filtering::{run_filter_pipeline, FilterConfig, FilterOutput};
use spatialvqa_core::reward::{group_rewards, RewardConfig, RewardVector, ValueSet};
use spatialvqa_core::scene::{ingest_annotations, random_scenes, SceneSample, Split};
use spatialvqa_core::scoring::{evaluate, random_baseline, read_responses, EvalConfig, PairingMode};
use spatialvqa_core::taskgen::{build_benchmark, read_manifest, write_manifest, GenConfig, TaskKind};

use crate::error::CliError;
use crate::models::ModelArgs;
use crate::service::{self, ServeArgs};

#[derive(Debug, Parser)]
#[command(name = "spatialvqa", version, about = "Spatial VQA benchmark tools and reward service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read an annotation dump (or synthesize scenes) into scenes.jsonl.
    Ingest(IngestArgs),
    /// Run the object filter stages and write retained images plus the stage report.
    Filter(FilterArgs),
    /// Generate a benchmark manifest from scenes and filter output.
    Generate(GenerateArgs),
    /// Score a response file against a manifest.
    Evaluate(EvaluateArgs),
    /// Compute reward vectors for a rollout file.
    Reward(RewardArgs),
    /// Build the chain-of-thought SFT dataset.
    CotGen(CotGenArgs),
    /// Score a uniform-random responder.
    RandomBaseline(RandomBaselineArgs),
    /// Run the reward/score HTTP service.
    Serve(ServeArgs),
}

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Ingest(a) => ingest(a),
        Command::Filter(a) => filter(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Reward(a) => reward(a),
        Command::CotGen(a) => cot_gen(a),
        Command::RandomBaseline(a) => baseline(a),
        Command::Serve(a) => service::serve(a),
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PairingArg {
    Paired,
    Independent,
}

impl From<PairingArg> for PairingMode {
    fn from(p: PairingArg) -> Self {
        match p {
            PairingArg::Paired => PairingMode::Paired,
            PairingArg::Independent => PairingMode::Independent,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ValueSetArg {
    ZeroOne,
    NegOneOne,
}

impl From<ValueSetArg> for ValueSet {
    fn from(v: ValueSetArg) -> Self {
        match v {
            ValueSetArg::ZeroOne => ValueSet::ZeroOne,
            ValueSetArg::NegOneOne => ValueSet::NegOneOne,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a TOML config; a missing or malformed file is a usage error.
pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_scenes(path: &Path) -> Result<Vec<SceneSample>, CliError> {
    let scenes: Vec<SceneSample> = read_jsonl(path)?;
    for s in &scenes {
        s.validate().map_err(|e| CliError::Data(format!("scene {}: {e}", s.sample_id)))?;
    }
    Ok(scenes)
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Annotation dump (JSON).
    #[arg(long, value_name = "FILE", required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: Split,
    /// Generate N synthetic scenes instead of reading a dump.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output scenes, one per line.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

fn ingest(a: IngestArgs) -> Result<(), CliError> {
    let scenes = match (&a.input, a.synthetic) {
        (Some(path), _) => {
            let (scenes, report) = ingest_annotations(path, a.split)?;
            tracing::info!(
                samples = report.samples,
                objects = report.objects,
                skipped_non_keyframes = report.skipped_non_keyframes,
                skipped_other_split = report.skipped_other_split,
                "ingested"
            );
            scenes
        }
        (None, Some(n)) => random_scenes(n, a.seed),
        (None, None) => return Err(CliError::Usage("pass --input or --synthetic".into())),
    };
    write_jsonl(&a.out, &scenes)?;
    println!("{} scenes -> {}", scenes.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long, value_name = "FILE")]
    pub scenes: PathBuf,
    /// Filter config TOML; unset keys take their defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Standardize the dataset's own descriptions instead of captioning.
    #[arg(long)]
    pub use_existing_descriptions: bool,
    /// Filter output (retained images and stage report) as JSON.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

fn filter(a: FilterArgs) -> Result<(), CliError> {
    let mut cfg: FilterConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => FilterConfig::default(),
    };
    cfg.use_existing_descriptions |= a.use_existing_descriptions;
    cfg.validate()?;
    let captioner = if cfg.use_existing_descriptions {
        a.model.build()?
    } else {
        Some(a.model.require("captioning")?)
    };
    let scenes = read_scenes(&a.scenes)?;
    let out = match &captioner {
        Some(c) => run_filter_pipeline(&scenes, &cfg, c.as_ref())?,
        None => run_filter_pipeline(&scenes, &cfg, &ScriptedClient::new(vec![]))?,
    };
    write_json(&a.out, &out)?;
    for s in &out.report.stages {
        println!("{:<16} {:>7} -> {:>7}", format!("{:?}", s.stage), s.input, s.output());
    }
    println!("{} of {} images retained", out.report.images_retained, out.report.images);
    Ok(())
}

fn parse_counts(text: &str) -> Result<BTreeMap<TaskKind, usize>, String> {
    let mut out = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| format!("expected task=N, got {part:?}"))?;
        let task: TaskKind = k.parse()?;
        let n: usize = v.trim().parse().map_err(|_| format!("bad count {v:?} for {task}"))?;
        out.insert(task, n);
    }
    Ok(out)
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_name = "FILE")]
    pub scenes: PathBuf,
    /// Output of `filter`.
    #[arg(long, value_name = "FILE")]
    pub filtered: PathBuf,
    /// Generation config TOML.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Questions per task for every task.
    #[arg(long, value_name = "N")]
    pub count: Option<usize>,
    /// Per-task question counts, e.g. `yaw=10,depth=5`.
    #[arg(long, value_name = "LIST", value_parser = parse_counts)]
    pub counts: Option<BTreeMap<TaskKind, usize>>,
    #[arg(long)]
    pub pair_front_behind: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => GenConfig::default(),
    };
    if let Some(n) = a.count {
        cfg = cfg.with_all_counts(n);
    }
    for (task, n) in a.counts.iter().flatten() {
        cfg = cfg.with_count(*task, *n);
    }
    cfg.pair_front_behind |= a.pair_front_behind;
    cfg.validate()?;
    if cfg.counts.values().all(|&n| n == 0) {
        return Err(CliError::Usage("no questions requested: pass --count, --counts or counts in --config".into()));
    }
    let scenes = read_scenes(&a.scenes)?;
    let filtered: FilterOutput = serde_json::from_reader(open(&a.filtered)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.filtered.display())))?;
    let m = build_benchmark(&scenes, &filtered, &cfg, a.seed)?;
    write_manifest(&m, &a.out)?;
    println!("{} records ({} questions) -> {}", m.total(), m.question_counts().values().sum::<usize>(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// One `{"qa_id", "response"}` per line.
    #[arg(long, value_name = "FILE")]
    pub responses: PathBuf,
    /// Score report, one line per task plus an overall line.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write the per-record scores here.
    #[arg(long, value_name = "FILE")]
    pub per_record: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "paired")]
    pub pairing: PairingArg,
    /// Responses carry no <location> section.
    #[arg(long)]
    pub no_location: bool,
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<(), CliError> {
    let m = read_manifest(&a.manifest)?;
    m.validate()?;
    let responses = read_responses(open(&a.responses)?)?;
    let index = m.index();
    let mut unknown: Vec<&String> = responses.keys().filter(|k| !index.contains_key(k.as_str())).collect();
    if !unknown.is_empty() {
        unknown.sort();
        return Err(CliError::Data(format!(
            "{} response(s) for qa_ids not in the manifest, first {}",
            unknown.len(),
            unknown[0]
        )));
    }
    let cfg = EvalConfig { pairing_mode: a.pairing.into(), expects_location: !a.no_location };
    let (report, per_qa) = evaluate(&m, &responses, &cfg);
    write_text(&a.out, &report.to_jsonl())?;
    if let Some(p) = &a.per_record {
        write_jsonl(p, &per_qa)?;
    }
    let missing = per_qa.iter().filter(|s| !s.answered).count();
    if missing > 0 {
        tracing::warn!(missing, "records without a response scored 0");
    }
    print!("{}", report.table());
    Ok(())
}

#[derive(Debug, Args)]
pub struct RewardArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// One `{"qa_id", "response"}` per line; a qa_id may repeat (G rollouts).
    #[arg(long, value_name = "FILE")]
    pub rollouts: PathBuf,
    /// Reward config TOML.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub value_set: Option<ValueSetArg>,
    /// Skip the logic channel (no verifier needed).
    #[arg(long)]
    pub no_logic: bool,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Verifier model for the logic channel.
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub qa_id: String,
    pub response: String,
}

/// One output line of `reward`: the rollout's position within its qa_id, then the vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub qa_id: String,
    pub rollout: usize,
    #[serde(flatten)]
    pub rewards: RewardVector,
}

fn reward(a: RewardArgs) -> Result<(), CliError> {
    let mut cfg: RewardConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => RewardConfig::default(),
    };
    if let Some(v) = a.value_set {
        cfg.value_set = v.into();
    }
    if a.no_logic {
        cfg.logic_enabled = false;
    }
    cfg.validate()?;
    let verifier = a.model.build()?;
    if cfg.logic_enabled && verifier.is_none() {
        return Err(CliError::Usage(
            "the logic channel needs a verifier: pass --script, --client-config or --live, or --no-logic".into(),
        ));
    }
    let m = read_manifest(&a.manifest)?;
    let index = m.index();
    let rollouts: Vec<Rollout> = read_jsonl(&a.rollouts)?;

    // group by qa_id so each group's rollouts run concurrently, then restore input order
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in rollouts.iter().enumerate() {
        if !index.contains_key(r.qa_id.as_str()) {
            return Err(CliError::Data(format!("{}:{}: unknown qa_id {}", a.rollouts.display(), i + 1, r.qa_id)));
        }
        groups.entry(r.qa_id.as_str()).or_default().push(i);
    }
    let mut out: Vec<Option<RewardRecord>> = vec![None; rollouts.len()];
    for (qa_id, idx) in &groups {
        let texts: Vec<String> = idx.iter().map(|&i| rollouts[i].response.clone()).collect();
        let g = group_rewards(index[qa_id], &texts, verifier.as_deref(), &cfg)?;
        for (k, (&i, r)) in idx.iter().zip(g.rewards).enumerate() {
            out[i] = Some(RewardRecord { qa_id: qa_id.to_string(), rollout: k, rewards: r });
        }
    }
    let records: Vec<RewardRecord> = out.into_iter().map(|r| r.expect("every rollout scored")).collect();
    write_jsonl(&a.out, &records)?;
    println!("{} rollouts over {} qa_ids -> {}", records.len(), groups.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct CotGenArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// SFT dataset, one record per line.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Run report and distilled rules as JSON.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reflection samples per rule set.
    #[arg(long, default_value_t = CotConfig::default().k)]
    pub k: usize,
    /// Distill one rule set across all tasks.
    #[arg(long)]
    pub shared_rules: bool,
    /// Send prompts without the image.
    #[arg(long)]
    pub no_images: bool,
    #[arg(long, default_value_t = CotConfig::default().max_in_flight)]
    pub max_in_flight: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

fn cot_gen(a: CotGenArgs) -> Result<(), CliError> {
    if a.k == 0 || a.max_in_flight == 0 {
        return Err(CliError::Usage("--k and --max-in-flight must be at least 1".into()));
    }
    let model = a.model.require("cot-gen")?;
    let cfg = CotConfig {
        k: a.k,
        per_task_rules: !a.shared_rules,
        attach_images: !a.no_images,
        max_in_flight: a.max_in_flight,
    };
    let m = read_manifest(&a.manifest)?;
    let run = run_cot_pipeline(&m, &CotClients::single(model.as_ref()), &cfg, a.seed)?;
    write_text(&a.out, &run.dataset_jsonl())?;
    if let Some(p) = &a.report {
        write_json(p, &serde_json::json!({ "report": run.report, "rules": run.rules }))?;
    }
    let r = &run.report;
    println!(
        "{} samples ({} corrected, {} rejected, {} failed) -> {}",
        r.emitted,
        r.corrected,
        r.generation_rejected.len(),
        r.generation_failed.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct RandomBaselineArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "paired")]
    pub pairing: PairingArg,
    /// Full result (report, standard errors, trials) as JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

fn baseline(a: RandomBaselineArgs) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let m = read_manifest(&a.manifest)?;
    let b = random_baseline(&m, a.trials, a.seed, a.pairing.into());
    if let Some(p) = &a.out {
        write_json(p, &b)?;
    }
    print!("{}", b.report.table());
    let se: HashMap<_, _> = b.std_error.iter().map(|(k, v)| (k.short_label(), *v)).collect();
    let mut line = String::from("std error:");
    for task in TaskKind::ALL {
        if let Some(v) = se.get(task.short_label()) {
            line.push_str(&format!(" {}={v:.2}", task.short_label()));
        }
    }
    println!("{line}");
    Ok(())
}
