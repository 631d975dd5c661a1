//! Experiment orchestration: prompting classification (EXP1), adapter
//! tuning followed by zero-shot evaluation (EXP2), and explanation-trained
//! classifiers (EXP3).
//!
//! # Run directory
//!
//! | file | contents |
//! |------|----------|
//! | `manifest.json` | [`RunManifest`], written before the first prediction |
//! | `explanations.jsonl` | append-only [`ExplanationRecord`] lines; the generation cache |
//! | `predictions.jsonl` | one [`PredictionRecord`] per evaluated sample, in corpus order |
//! | `metrics.json` | [`RunMetrics`] |
//! | `run.log` | plain-text progress lines, no timestamps |
//!
//! Field names in these files are stable; new optional fields may be added.
//! Every raw backend output, for any experiment, is stored in
//! `explanations.jsonl` and a prediction's `raw_output_ref` is its key there.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::backends::{
    validate_finetune_config, BackendError, ClassifierError, FineTuneConfig, FineTuneSettings,
    GenerationBackend, GenerationConfig, GenerationRequest, ReferenceClassifier, TrainableClassifier,
    TrainingPair,
};
use crate::corpus::{self, Corpus, CorpusError, Dataset, Gold, MemeSample, TaskId, TaskSpec};
use crate::metrics::{self, MetricReport, MetricsError};
use crate::prompting::{
    build_prompt, parse_label, parse_multilabel, select_exemplars, Exemplar, PromptError,
    PromptStrategy, PromptTemplateSet, StrategyKind,
};
use crate::text;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EXPLANATIONS_FILE: &str = "explanations.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOG_FILE: &str = "run.log";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("backend `{backend}` does not support {strategy} prompting")]
    UnsupportedStrategy { backend: String, strategy: StrategyKind },
    #[error("run aborted: {failed} of {total} samples failed (limit {limit:.0}%)")]
    RunAborted { failed: usize, total: usize, limit: f64 },
    #[error("missing explanations for {} sample(s): {}", .0.len(), .0.join(", "))]
    MissingExplanations(Vec<String>),
    #[error("samples used for both fitting and scoring: {}", .0.join(", "))]
    PartitionViolation(Vec<String>),
    #[error("corpus has no gold labels for task {0}")]
    TaskNotInCorpus(TaskId),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Experiment {
    Exp1,
    Exp2,
    Exp3,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Exp1 => "EXP1",
            Experiment::Exp2 => "EXP2",
            Experiment::Exp3 => "EXP3",
        })
    }
}

impl std::str::FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "exp1" => Ok(Experiment::Exp1),
            "exp2" => Ok(Experiment::Exp2),
            "exp3" => Ok(Experiment::Exp3),
            other => Err(format!("unknown experiment `{other}` (expected exp1, exp2 or exp3)")),
        }
    }
}

/// Source of timestamps written into explanation records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    /// Always returns the given Unix time; used for reproducible offline runs.
    Fixed(u64),
}

impl Clock {
    pub fn now(self) -> u64 {
        match self {
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            Clock::Fixed(t) => t,
        }
    }
}

/// Cache key of one generation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExplanationKey {
    pub sample_id: String,
    pub backend_id: String,
    pub strategy: StrategyKind,
    pub prompt_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationRecord {
    pub sample_id: String,
    pub backend_id: String,
    pub strategy: StrategyKind,
    /// SHA-256 of the exact prompt text.
    pub prompt_hash: String,
    pub explanation: String,
    /// Unix seconds.
    pub created_at: u64,
}

impl ExplanationRecord {
    pub fn key(&self) -> ExplanationKey {
        ExplanationKey {
            sample_id: self.sample_id.clone(),
            backend_id: self.backend_id.clone(),
            strategy: self.strategy,
            prompt_hash: self.prompt_hash.clone(),
        }
    }
}

/// Append-only explanation cache, optionally backed by a JSON-lines file.
#[derive(Debug, Default)]
pub struct ExplanationStore {
    path: Option<PathBuf>,
    records: Vec<ExplanationRecord>,
    index: HashMap<ExplanationKey, usize>,
}

impl ExplanationStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = ExplanationRecord>) -> Self {
        let mut store = Self::default();
        for r in records {
            store.insert(r);
        }
        store
    }

    /// Open (or lazily create) a file-backed store.
    pub fn open(path: &Path) -> Result<Self, PipelineError> {
        let mut store = Self {
            path: Some(path.to_path_buf()),
            ..Self::default()
        };
        if !path.exists() {
            return Ok(store);
        }
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ExplanationRecord =
                serde_json::from_str(&line).map_err(|e| PipelineError::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            store.insert(record);
        }
        Ok(store)
    }

    fn insert(&mut self, record: ExplanationRecord) -> bool {
        let key = record.key();
        if self.index.contains_key(&key) {
            return false;
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        true
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ExplanationRecord] {
        &self.records
    }

    pub fn get(&self, key: &ExplanationKey) -> Option<&ExplanationRecord> {
        self.index.get(key).map(|&i| &self.records[i])
    }

    /// Most recently appended record for `(sample, backend, strategy)`.
    pub fn latest(&self, sample_id: &str, backend_id: &str, strategy: StrategyKind) -> Option<&ExplanationRecord> {
        self.records
            .iter()
            .rev()
            .find(|r| r.sample_id == sample_id && r.backend_id == backend_id && r.strategy == strategy)
    }

    /// Append records whose key is new, persisting them first when the store
    /// is file-backed. Returns how many were added.
    pub fn append(&mut self, records: Vec<ExplanationRecord>) -> Result<usize, PipelineError> {
        let mut seen = HashSet::new();
        let fresh: Vec<ExplanationRecord> = records
            .into_iter()
            .filter(|r| !self.index.contains_key(&r.key()) && seen.insert(r.key()))
            .collect();
        if fresh.is_empty() {
            return Ok(0);
        }
        if let Some(path) = &self.path {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| io_err(path, e))?;
            let mut w = BufWriter::new(file);
            for r in &fresh {
                serde_json::to_writer(&mut w, r).map_err(|e| io_err(path, e))?;
                w.write_all(b"\n").map_err(|e| io_err(path, e))?;
            }
            w.flush().map_err(|e| io_err(path, e))?;
        }
        let n = fresh.len();
        for r in fresh {
            self.insert(r);
        }
        Ok(n)
    }
}

/// A predicted label, label set, or the UNPARSED sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prediction {
    Label(String),
    Labels(BTreeSet<String>),
    Unparsed,
}

impl Prediction {
    pub const UNPARSED: &'static str = "UNPARSED";

    pub fn is_unparsed(&self) -> bool {
        matches!(self, Prediction::Unparsed)
    }

    fn as_label(&self) -> Option<&str> {
        match self {
            Prediction::Label(l) => Some(l),
            _ => None,
        }
    }

    fn to_set(&self) -> BTreeSet<String> {
        match self {
            Prediction::Label(l) => BTreeSet::from([l.clone()]),
            Prediction::Labels(set) => set.clone(),
            Prediction::Unparsed => BTreeSet::new(),
        }
    }

    pub fn matches(&self, gold: &Gold) -> bool {
        match (self, gold) {
            (Prediction::Unparsed, _) => false,
            (Prediction::Label(p), Gold::Single(g)) => p == g,
            (p, g) => p.to_set() == g.to_set(),
        }
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prediction::Label(l) => f.write_str(l),
            Prediction::Labels(set) => {
                let v: Vec<&str> = set.iter().map(String::as_str).collect();
                write!(f, "{{{}}}", v.join(", "))
            }
            Prediction::Unparsed => f.write_str(Self::UNPARSED),
        }
    }
}

impl Serialize for Prediction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Prediction::Label(l) => s.serialize_str(l),
            Prediction::Labels(set) => set.serialize(s),
            Prediction::Unparsed => s.serialize_str(Self::UNPARSED),
        }
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(String),
            Many(BTreeSet<String>),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::One(s) if s == Self::UNPARSED => Prediction::Unparsed,
            Raw::One(s) => Prediction::Label(s),
            Raw::Many(set) => Prediction::Labels(set),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    Prompted,
    FinetunedBackend,
    CovexfilClassifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub task_id: TaskId,
    pub predicted: Prediction,
    pub gold: Gold,
    pub source: PredictionSource,
    /// Key of the raw output in the explanation store; absent when the
    /// backend produced nothing.
    pub raw_output_ref: Option<ExplanationKey>,
    /// Why the sample degraded to UNPARSED, if it failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        self.predicted.matches(&self.gold)
    }
}

/// How multi-label tasks are prompted and parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiLabelMode {
    /// Ask for every applicable label and parse a set.
    #[default]
    MultiLabel,
    /// Parse a single label and score it as a singleton set.
    ForcedSingle,
}

/// Weighted F1 over a list of predictions. Multi-label tasks use the
/// indicator-vector variant with UNPARSED scored as the empty set.
pub fn score(task: &TaskSpec, predictions: &[PredictionRecord]) -> Result<MetricReport, MetricsError> {
    if task.multi_label {
        let preds: Vec<BTreeSet<String>> = predictions.iter().map(|p| p.predicted.to_set()).collect();
        let golds: Vec<BTreeSet<String>> = predictions.iter().map(|p| p.gold.to_set()).collect();
        let mut report = metrics::weighted_f1_multilabel(&preds, &golds, &task.labels)?;
        report.unparsed = predictions.iter().filter(|p| p.predicted.is_unparsed()).count();
        Ok(report)
    } else {
        let preds: Vec<Option<&str>> = predictions.iter().map(|p| p.predicted.as_label()).collect();
        let golds: Vec<String> = predictions.iter().map(|p| p.gold.to_string()).collect();
        metrics::weighted_f1(&preds, &golds, &task.labels)
    }
}

/// A sample whose generation failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedSample {
    pub sample_id: String,
    pub reason: String,
}

/// Settings shared by every generation pass.
#[derive(Debug, Clone)]
pub struct GenerationOptions {
    pub generation: GenerationConfig,
    /// Requested fan-out; capped by the backend's own limit.
    pub concurrency: usize,
    /// Abort when the failed fraction strictly exceeds this.
    pub abort_fraction: f64,
    pub clock: Clock,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            generation: GenerationConfig::default(),
            concurrency: 1,
            abort_fraction: 0.5,
            clock: Clock::System,
        }
    }
}

/// Result of one generation pass, aligned with the input samples.
#[derive(Debug, Clone, Default)]
pub struct GenerationReport {
    /// Store key per sample, `None` for flagged samples.
    pub keys: Vec<Option<ExplanationKey>>,
    pub generated: usize,
    pub cached: usize,
    pub flagged: Vec<FlaggedSample>,
}

fn check_strategy(backend: &dyn GenerationBackend, kind: StrategyKind) -> Result<(), PipelineError> {
    if kind.is_few_shot() && !backend.capabilities().supports_few_shot {
        return Err(PipelineError::UnsupportedStrategy {
            backend: backend.backend_id().to_string(),
            strategy: kind,
        });
    }
    Ok(())
}

struct Job<'a> {
    sample: &'a MemeSample,
    prompt: String,
    key: ExplanationKey,
}

/// Run `f` over `items` on at most `workers` threads; results come back in
/// input order.
fn fan_out<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut indexed: Vec<(usize, R)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= items.len() {
                            break out;
                        }
                        out.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("generation worker panicked"))
            .collect()
    });
    indexed.sort_by_key(|(i, _)| *i);
    indexed.into_iter().map(|(_, r)| r).collect()
}

/// Generate (or reuse) one output per sample under `backend_id`.
///
/// Prompts are the classification prompts for `strategy`. Cached keys are
/// never regenerated; new records are appended in sample order. Failed
/// samples are flagged, and the pass aborts only when the failed fraction
/// exceeds `opts.abort_fraction` (successful records are kept either way).
#[allow(clippy::too_many_arguments)]
pub fn generate_explanations(
    samples: &[MemeSample],
    task: &TaskSpec,
    backend: &dyn GenerationBackend,
    strategy: &PromptStrategy,
    exemplars: &[Exemplar],
    templates: &PromptTemplateSet,
    store: &mut ExplanationStore,
    opts: &GenerationOptions,
) -> Result<GenerationReport, PipelineError> {
    generate_with_id(
        samples,
        task,
        backend,
        backend.backend_id(),
        strategy,
        exemplars,
        templates,
        store,
        opts,
    )
}

#[allow(clippy::too_many_arguments)]
fn generate_with_id(
    samples: &[MemeSample],
    task: &TaskSpec,
    backend: &dyn GenerationBackend,
    backend_id: &str,
    strategy: &PromptStrategy,
    exemplars: &[Exemplar],
    templates: &PromptTemplateSet,
    store: &mut ExplanationStore,
    opts: &GenerationOptions,
) -> Result<GenerationReport, PipelineError> {
    check_strategy(backend, strategy.kind)?;
    let mut jobs = Vec::with_capacity(samples.len());
    for sample in samples {
        let prompt = build_prompt(task, strategy, sample, exemplars, templates)?;
        let key = ExplanationKey {
            sample_id: sample.sample_id.clone(),
            backend_id: backend_id.to_string(),
            strategy: strategy.kind,
            prompt_hash: text::sha256_hex(&prompt),
        };
        jobs.push(Job { sample, prompt, key });
    }
    let pending: Vec<&Job> = jobs.iter().filter(|j| store.get(&j.key).is_none()).collect();
    let cached = jobs.len() - pending.len();
    let workers = opts.concurrency.min(backend.max_concurrency());
    let outcomes = fan_out(&pending, workers, |job| {
        let request = GenerationRequest {
            sample_id: &job.sample.sample_id,
            image_ref: &job.sample.image_ref,
            prompt: &job.prompt,
            config: &opts.generation,
        };
        crate::backends::generate(backend, &request)
    });

    let mut failed: HashMap<&str, String> = HashMap::new();
    let mut fresh = Vec::new();
    for (job, outcome) in pending.iter().zip(outcomes) {
        match outcome {
            Ok(text) => fresh.push(ExplanationRecord {
                sample_id: job.key.sample_id.clone(),
                backend_id: job.key.backend_id.clone(),
                strategy: job.key.strategy,
                prompt_hash: job.key.prompt_hash.clone(),
                explanation: text,
                created_at: opts.clock.now(),
            }),
            Err(e) => {
                log::warn!("sample {}: {e}", job.sample.sample_id);
                failed.insert(job.sample.sample_id.as_str(), e.to_string());
            }
        }
    }
    let generated = store.append(fresh)?;

    let mut report = GenerationReport {
        generated,
        cached,
        ..Default::default()
    };
    for job in &jobs {
        match failed.get(job.sample.sample_id.as_str()) {
            Some(reason) => {
                report.keys.push(None);
                report.flagged.push(FlaggedSample {
                    sample_id: job.sample.sample_id.clone(),
                    reason: reason.clone(),
                });
            }
            None => report.keys.push(Some(job.key.clone())),
        }
    }
    let total = jobs.len();
    if total > 0 && report.flagged.len() as f64 > opts.abort_fraction * total as f64 {
        return Err(PipelineError::RunAborted {
            failed: report.flagged.len(),
            total,
            limit: opts.abort_fraction * 100.0,
        });
    }
    Ok(report)
}

/// Everything an experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub predictions: Vec<PredictionRecord>,
    pub report: MetricReport,
    pub flagged: Vec<FlaggedSample>,
    /// Test samples left out for lack of an explanation (EXP3).
    pub excluded: Vec<String>,
    pub generated: usize,
    pub cached: usize,
}

fn assert_disjoint<'a>(
    fit: impl IntoIterator<Item = &'a str>,
    score: impl IntoIterator<Item = &'a str>,
) -> Result<(), PipelineError> {
    let fit: HashSet<&str> = fit.into_iter().collect();
    let overlap: Vec<String> = score
        .into_iter()
        .filter(|id| fit.contains(id))
        .map(str::to_string)
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::PartitionViolation(overlap))
    }
}

fn gold_of(sample: &MemeSample, task: TaskId) -> Result<&Gold, PipelineError> {
    sample.gold_for(task).ok_or(PipelineError::TaskNotInCorpus(task))
}

fn parse_prediction(raw: &str, task: &TaskSpec, marker: &str, mode: MultiLabelMode) -> Prediction {
    if !task.multi_label {
        return parse_label(raw, task, marker).label.map_or(Prediction::Unparsed, Prediction::Label);
    }
    match mode {
        MultiLabelMode::ForcedSingle => parse_label(raw, task, marker)
            .label
            .map_or(Prediction::Unparsed, |l| Prediction::Labels(BTreeSet::from([l]))),
        MultiLabelMode::MultiLabel => {
            let has_marker = raw.lines().any(|l| l.trim_start().starts_with(marker.trim()));
            let set = parse_multilabel(raw, task, marker);
            if set.is_empty() && !has_marker {
                Prediction::Unparsed
            } else {
                Prediction::Labels(set)
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn prompt_and_score(
    eval: &Corpus,
    task: &TaskSpec,
    backend: &dyn GenerationBackend,
    backend_id: &str,
    strategy: &PromptStrategy,
    exemplars: &[Exemplar],
    templates: &PromptTemplateSet,
    store: &mut ExplanationStore,
    opts: &GenerationOptions,
    mode: MultiLabelMode,
    source: PredictionSource,
) -> Result<ExperimentOutcome, PipelineError> {
    if !eval.has_task(task.task_id) {
        return Err(PipelineError::TaskNotInCorpus(task.task_id));
    }
    let gen = generate_with_id(
        eval.samples(),
        task,
        backend,
        backend_id,
        strategy,
        exemplars,
        templates,
        store,
        opts,
    )?;
    let reasons: HashMap<&str, &str> = gen
        .flagged
        .iter()
        .map(|f| (f.sample_id.as_str(), f.reason.as_str()))
        .collect();
    let mut predictions = Vec::with_capacity(eval.len());
    for (sample, key) in eval.samples().iter().zip(&gen.keys) {
        let predicted = match key {
            Some(key) => {
                let raw = &store.get(key).expect("generated key is stored").explanation;
                parse_prediction(raw, task, &templates.answer_marker, mode)
            }
            None => Prediction::Unparsed,
        };
        predictions.push(PredictionRecord {
            sample_id: sample.sample_id.clone(),
            task_id: task.task_id,
            predicted,
            gold: gold_of(sample, task.task_id)?.clone(),
            source,
            raw_output_ref: key.clone(),
            failure: reasons.get(sample.sample_id.as_str()).map(|r| r.to_string()),
        });
    }
    let report = score(task, &predictions)?;
    Ok(ExperimentOutcome {
        predictions,
        report,
        flagged: gen.flagged,
        excluded: Vec::new(),
        generated: gen.generated,
        cached: gen.cached,
    })
}

/// EXP1: classify every sample of `eval` by prompting the backend.
///
/// Few-shot exemplars are drawn from `exemplar_pool`, which must not share
/// samples with `eval`. Unparsable or failed outputs count as UNPARSED.
#[allow(clippy::too_many_arguments)]
pub fn run_exp1(
    eval: &Corpus,
    exemplar_pool: &Corpus,
    task: &TaskSpec,
    backend: &dyn GenerationBackend,
    strategy: &PromptStrategy,
    templates: &PromptTemplateSet,
    seed: u64,
    store: &mut ExplanationStore,
    opts: &GenerationOptions,
    mode: MultiLabelMode,
) -> Result<ExperimentOutcome, PipelineError> {
    check_strategy(backend, strategy.kind)?;
    let (strategy, exemplars) = resolve_exemplars(strategy, exemplar_pool, task, seed)?;
    assert_disjoint(
        exemplars.iter().filter_map(|e| e.sample_id.as_deref()),
        eval.samples().iter().map(|s| s.sample_id.as_str()),
    )?;
    prompt_and_score(
        eval,
        task,
        backend,
        backend.backend_id(),
        &strategy,
        &exemplars,
        templates,
        store,
        opts,
        mode,
        PredictionSource::Prompted,
    )
}

/// Pick exemplars for few-shot strategies, shrinking the shot count when the
/// pool is too small.
pub fn resolve_exemplars(
    strategy: &PromptStrategy,
    pool: &Corpus,
    task: &TaskSpec,
    seed: u64,
) -> Result<(PromptStrategy, Vec<Exemplar>), PipelineError> {
    if !strategy.kind.is_few_shot() {
        return Ok((strategy.clone(), Vec::new()));
    }
    let exemplars = select_exemplars(pool, task, strategy.shot_count, seed)?;
    let mut strategy = strategy.clone();
    strategy.shot_count = exemplars.len();
    Ok((strategy, exemplars))
}

fn training_label(gold: &Gold) -> String {
    match gold {
        Gold::Single(l) => l.clone(),
        Gold::Multi(set) if set.is_empty() => "none".to_string(),
        Gold::Multi(set) => set.iter().cloned().collect::<Vec<_>>().join(", "),
    }
}

/// Identifier under which outputs of the tuned backend are cached.
pub fn tuned_backend_id(backend_id: &str, cfg: &FineTuneConfig, train: &Corpus) -> String {
    let cfg_json = serde_json::to_string(cfg).expect("config serializes");
    let ids: Vec<&str> = train.samples().iter().map(|s| s.sample_id.as_str()).collect();
    let h = text::sha256_hex(&format!("{cfg_json}\u{0}{}", ids.join("\u{0}")));
    format!("{backend_id}+adapter-{}", &h[..12])
}

/// EXP2: validate the adapter configuration, let the backend train on
/// `(caption, gold)` pairs from `train`, then evaluate `test` with ZS
/// prompting of the tuned backend.
#[allow(clippy::too_many_arguments)]
pub fn run_exp2(
    train: &Corpus,
    test: &Corpus,
    task: &TaskSpec,
    backend: &mut dyn GenerationBackend,
    settings: &FineTuneSettings,
    templates: &PromptTemplateSet,
    store: &mut ExplanationStore,
    opts: &GenerationOptions,
    mode: MultiLabelMode,
) -> Result<(FineTuneConfig, ExperimentOutcome), PipelineError> {
    let cfg = validate_finetune_config(settings)?;
    if !backend.capabilities().supports_training {
        return Err(BackendError::BackendLacksTraining(backend.backend_id().to_string()).into());
    }
    assert_disjoint(
        train.samples().iter().map(|s| s.sample_id.as_str()),
        test.samples().iter().map(|s| s.sample_id.as_str()),
    )?;
    let mut pairs = Vec::with_capacity(train.len());
    for sample in train.samples() {
        pairs.push(TrainingPair {
            text: sample.caption.clone(),
            label: training_label(gold_of(sample, task.task_id)?),
        });
    }
    backend.fine_tune(&pairs, &cfg)?;
    let tuned_id = tuned_backend_id(backend.backend_id(), &cfg, train);
    let strategy = PromptStrategy::for_task(StrategyKind::ZS, task);
    let outcome = prompt_and_score(
        test,
        task,
        &*backend,
        &tuned_id,
        &strategy,
        &[],
        templates,
        store,
        opts,
        mode,
        PredictionSource::FinetunedBackend,
    )?;
    Ok((cfg, outcome))
}

/// Options for [`run_covexfil`].
#[derive(Debug, Clone, Default)]
pub struct CovexfilOptions {
    /// Prepend the meme caption to each explanation before classification.
    pub append_caption: bool,
    /// Fail instead of excluding samples that lack explanations.
    pub strict: bool,
}

fn classifier_input(sample: &MemeSample, explanation: &str, opts: &CovexfilOptions) -> String {
    if opts.append_caption && !sample.caption.trim().is_empty() {
        format!("{}\n{explanation}", sample.caption.trim())
    } else {
        explanation.to_string()
    }
}

/// EXP3 step two: train a classifier on the stored explanations of `train`
/// and score it on those of `test`.
///
/// Explanations are looked up as the latest record for
/// `(sample, backend_id, strategy)`. Samples without one are excluded and
/// listed in the outcome (or rejected when `opts.strict`). Multi-label gold
/// sets yield one training pair per label and predictions are singletons.
#[allow(clippy::too_many_arguments)]
pub fn run_covexfil(
    train: &Corpus,
    test: &Corpus,
    task: &TaskSpec,
    store: &ExplanationStore,
    backend_id: &str,
    strategy: StrategyKind,
    classifier: &mut dyn TrainableClassifier,
    seed: u64,
    opts: &CovexfilOptions,
) -> Result<ExperimentOutcome, PipelineError> {
    assert_disjoint(
        train.samples().iter().map(|s| s.sample_id.as_str()),
        test.samples().iter().map(|s| s.sample_id.as_str()),
    )?;
    let lookup = |s: &MemeSample| store.latest(&s.sample_id, backend_id, strategy);
    let missing: Vec<String> = train
        .samples()
        .iter()
        .chain(test.samples())
        .filter(|s| lookup(s).is_none())
        .map(|s| s.sample_id.clone())
        .collect();
    if opts.strict && !missing.is_empty() {
        return Err(PipelineError::MissingExplanations(missing));
    }

    let mut pairs = Vec::new();
    for sample in train.samples() {
        let Some(record) = lookup(sample) else { continue };
        let input = classifier_input(sample, &record.explanation, opts);
        for label in gold_of(sample, task.task_id)?.to_set() {
            pairs.push((input.clone(), label));
        }
    }
    classifier.train(&pairs, task, seed)?;

    let mut predictions = Vec::new();
    let mut excluded = Vec::new();
    for sample in test.samples() {
        let Some(record) = lookup(sample) else {
            excluded.push(sample.sample_id.clone());
            continue;
        };
        let label = classifier.predict(&classifier_input(sample, &record.explanation, opts))?;
        let predicted = if task.multi_label {
            Prediction::Labels(BTreeSet::from([label]))
        } else {
            Prediction::Label(label)
        };
        predictions.push(PredictionRecord {
            sample_id: sample.sample_id.clone(),
            task_id: task.task_id,
            predicted,
            gold: gold_of(sample, task.task_id)?.clone(),
            source: PredictionSource::CovexfilClassifier,
            raw_output_ref: Some(record.key()),
            failure: None,
        });
    }
    if !excluded.is_empty() {
        log::warn!("{} test sample(s) lack explanations and were excluded", excluded.len());
    }
    if predictions.is_empty() {
        return Err(PipelineError::MissingExplanations(excluded));
    }
    let report = score(task, &predictions)?;
    Ok(ExperimentOutcome {
        predictions,
        report,
        flagged: Vec::new(),
        excluded,
        generated: 0,
        cached: 0,
    })
}

/// Declarative description of one run; stored verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub experiment: Experiment,
    pub task: TaskId,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyKind,
    /// Few-shot exemplar count; defaults to min(labels, 4).
    #[serde(default)]
    pub shots: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub finetune: FineTuneSettings,
    #[serde(default)]
    pub append_caption: bool,
    #[serde(default)]
    pub strict_explanations: bool,
    #[serde(default)]
    pub multilabel_mode: MultiLabelMode,
    #[serde(default = "default_abort_fraction")]
    pub abort_fraction: f64,
}

fn default_strategy() -> StrategyKind {
    StrategyKind::ZS
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_abort_fraction() -> f64 {
    0.5
}

impl RunSpec {
    pub fn new(experiment: Experiment, task: TaskId, strategy: StrategyKind) -> Self {
        Self {
            experiment,
            task,
            strategy,
            shots: None,
            seed: 0,
            test_fraction: default_test_fraction(),
            generation: GenerationConfig::default(),
            finetune: FineTuneSettings::default(),
            append_caption: false,
            strict_explanations: false,
            multilabel_mode: MultiLabelMode::default(),
            abort_fraction: default_abort_fraction(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn prompt_strategy(&self, task: &TaskSpec) -> Result<PromptStrategy, PromptError> {
        let base = PromptStrategy::for_task(self.strategy, task);
        match self.shots {
            Some(k) if self.strategy.is_few_shot() => {
                PromptStrategy::new(self.strategy, k).map(|s| PromptStrategy { cot_steps: base.cot_steps, ..s })
            }
            _ => Ok(base),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub generation: GenerationConfig,
    pub finetune: Option<FineTuneConfig>,
    pub alpha_rank_ratio: Option<f64>,
    pub template_hash: String,
    pub test_fraction: f64,
    pub append_caption: bool,
    pub strict_explanations: bool,
    pub multilabel_mode: MultiLabelMode,
    pub abort_fraction: f64,
    pub classifier_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub exemplars: u64,
    pub classifier: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of every other manifest field.
    pub run_id: String,
    pub experiment: Experiment,
    pub dataset: Dataset,
    pub tasks: Vec<TaskId>,
    pub backend_id: String,
    pub strategy: StrategyKind,
    pub shot_count: usize,
    pub exemplar_ids: Vec<String>,
    pub seeds: Seeds,
    pub config: ConfigSnapshot,
    /// SHA-256 of the canonical corpus serialization.
    pub corpus_hash: String,
    pub train_size: usize,
    pub test_size: usize,
    pub code_version: String,
    /// Caller-supplied description of the inputs (the CLI stores its full
    /// configuration here so a run can be replayed from the manifest).
    #[serde(default)]
    pub inputs: Option<serde_json::Value>,
}

impl RunManifest {
    fn seal(mut self) -> Self {
        self.run_id.clear();
        let body = serde_json::to_string(&self).expect("manifest serializes");
        self.run_id = text::sha256_hex(&body)[..16].to_string();
        self
    }

    pub fn read(dir: &Path) -> Result<Self, PipelineError> {
        read_json(&dir.join(MANIFEST_FILE))
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub experiment: Experiment,
    pub task: TaskId,
    pub backend_id: String,
    pub strategy: StrategyKind,
    pub classifier_id: Option<String>,
    pub report: MetricReport,
    pub flagged: Vec<FlaggedSample>,
    pub excluded: Vec<String>,
}

impl RunMetrics {
    pub fn read(dir: &Path) -> Result<Self, PipelineError> {
        read_json(&dir.join(METRICS_FILE))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let body = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&body).map_err(|e| PipelineError::Record {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut body = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    body.push('\n');
    fs::write(path, body).map_err(|e| io_err(path, e))
}

pub fn read_predictions(dir: &Path) -> Result<Vec<PredictionRecord>, PipelineError> {
    let path = dir.join(PREDICTIONS_FILE);
    let body = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Record {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_predictions(path: &Path, predictions: &[PredictionRecord]) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for p in predictions {
        serde_json::to_writer(&mut w, p).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Hash of the corpus as written by [`Corpus::write_jsonl`].
pub fn corpus_hash(corpus: &Corpus) -> String {
    let mut body = String::new();
    for s in corpus.samples() {
        body.push_str(&serde_json::to_string(s).expect("sample serializes"));
        body.push('\n');
    }
    text::sha256_hex(&body)
}

/// Runtime knobs that must not influence outputs.
#[derive(Clone)]
pub struct Runtime {
    pub concurrency: usize,
    pub clock: Clock,
    /// Builds the EXP3 classifier.
    pub classifier: fn() -> Box<dyn TrainableClassifier>,
}

impl Default for Runtime {
    fn default() -> Self {
        Self {
            concurrency: 1,
            clock: Clock::System,
            classifier: || Box::new(ReferenceClassifier::new()),
        }
    }
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("concurrency", &self.concurrency)
            .field("clock", &self.clock)
            .finish_non_exhaustive()
    }
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub metrics: RunMetrics,
    pub generated: usize,
    pub cached: usize,
}

struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    fn line(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::info!("{msg}");
        self.lines.push(msg);
    }

    fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let path = dir.join(LOG_FILE);
        let mut body = self.lines.join("\n");
        body.push('\n');
        fs::write(&path, body).map_err(|e| io_err(&path, e))
    }
}

/// Run one experiment end to end inside `run_dir`.
///
/// The corpus is split with `spec.seed` and `spec.test_fraction`; the test
/// part is evaluated. EXP1 and EXP3 draw few-shot exemplars from the train
/// part, and EXP3 generates explanations for both parts before training the
/// classifier. An existing `explanations.jsonl` in `run_dir` is reused as
/// cache. The manifest is written before any prediction and survives an
/// aborted run.
pub fn run_experiment(
    spec: &RunSpec,
    corpus: &Corpus,
    backend: &mut dyn GenerationBackend,
    templates: &PromptTemplateSet,
    run_dir: &Path,
    runtime: &Runtime,
    inputs: Option<serde_json::Value>,
) -> Result<RunSummary, PipelineError> {
    fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let mut log = RunLog { lines: Vec::new() };
    let result = run_inner(spec, corpus, backend, templates, run_dir, runtime, inputs, &mut log);
    if let Err(e) = &result {
        log.line(format!("run failed: {e}"));
    }
    log.write(run_dir)?;
    result
}

#[allow(clippy::too_many_arguments)]
fn run_inner(
    spec: &RunSpec,
    corpus: &Corpus,
    backend: &mut dyn GenerationBackend,
    templates: &PromptTemplateSet,
    run_dir: &Path,
    runtime: &Runtime,
    inputs: Option<serde_json::Value>,
    log: &mut RunLog,
) -> Result<RunSummary, PipelineError> {
    let task = TaskSpec::get(spec.task);
    if !corpus.has_task(spec.task) {
        return Err(PipelineError::TaskNotInCorpus(spec.task));
    }
    let finetune = match spec.experiment {
        Experiment::Exp2 => Some(validate_finetune_config(&spec.finetune)?),
        _ => None,
    };
    let strategy = match spec.experiment {
        Experiment::Exp2 => PromptStrategy::for_task(StrategyKind::ZS, task),
        _ => spec.prompt_strategy(task)?,
    };
    check_strategy(&*backend, strategy.kind)?;

    let (train, test) = corpus::split(corpus, spec.test_fraction, spec.seed)?;
    let (strategy, exemplars) = match spec.experiment {
        Experiment::Exp2 => (strategy, Vec::new()),
        _ => resolve_exemplars(&strategy, &train, task, spec.seed)?,
    };
    let mut classifier = (spec.experiment == Experiment::Exp3).then(runtime.classifier);

    let manifest = RunManifest {
        run_id: String::new(),
        experiment: spec.experiment,
        dataset: corpus.dataset(),
        tasks: vec![spec.task],
        backend_id: backend.backend_id().to_string(),
        strategy: strategy.kind,
        shot_count: strategy.shot_count,
        exemplar_ids: exemplars.iter().filter_map(|e| e.sample_id.clone()).collect(),
        seeds: Seeds {
            split: spec.seed,
            exemplars: spec.seed,
            classifier: spec.seed,
        },
        config: ConfigSnapshot {
            generation: spec.generation.clone(),
            alpha_rank_ratio: finetune.as_ref().map(FineTuneConfig::alpha_rank_ratio),
            finetune: finetune.clone(),
            template_hash: templates.content_hash(),
            test_fraction: spec.test_fraction,
            append_caption: spec.append_caption,
            strict_explanations: spec.strict_explanations,
            multilabel_mode: spec.multilabel_mode,
            abort_fraction: spec.abort_fraction,
            classifier_id: classifier.as_ref().map(|c| c.classifier_id().to_string()),
        },
        corpus_hash: corpus_hash(corpus),
        train_size: train.len(),
        test_size: test.len(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs,
    }
    .seal();
    write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;
    log.line(format!(
        "run {} {} task={} backend={} strategy={} train={} test={}",
        manifest.run_id,
        spec.experiment,
        spec.task,
        manifest.backend_id,
        strategy.kind,
        train.len(),
        test.len()
    ));

    let mut store = ExplanationStore::open(&run_dir.join(EXPLANATIONS_FILE))?;
    let opts = GenerationOptions {
        generation: spec.generation.clone(),
        concurrency: runtime.concurrency.max(1),
        abort_fraction: spec.abort_fraction,
        clock: runtime.clock,
    };

    let outcome = match spec.experiment {
        Experiment::Exp1 => run_exp1(
            &test,
            &train,
            task,
            &*backend,
            &strategy,
            templates,
            spec.seed,
            &mut store,
            &opts,
            spec.multilabel_mode,
        )?,
        Experiment::Exp2 => {
            let (_, outcome) = run_exp2(
                &train,
                &test,
                task,
                backend,
                &spec.finetune,
                templates,
                &mut store,
                &opts,
                spec.multilabel_mode,
            )?;
            outcome
        }
        Experiment::Exp3 => {
            let gen = generate_explanations(
                corpus.samples(),
                task,
                &*backend,
                &strategy,
                &exemplars,
                templates,
                &mut store,
                &opts,
            )?;
            log.line(format!(
                "explanations: {} generated, {} cached, {} flagged",
                gen.generated,
                gen.cached,
                gen.flagged.len()
            ));
            let classifier = classifier.as_deref_mut().expect("EXP3 builds a classifier");
            let mut outcome = run_covexfil(
                &train,
                &test,
                task,
                &store,
                backend.backend_id(),
                strategy.kind,
                classifier,
                spec.seed,
                &CovexfilOptions {
                    append_caption: spec.append_caption,
                    strict: spec.strict_explanations,
                },
            )?;
            outcome.flagged = gen.flagged;
            outcome.generated = gen.generated;
            outcome.cached = gen.cached;
            outcome
        }
    };
    if spec.experiment != Experiment::Exp3 {
        log.line(format!(
            "outputs: {} generated, {} cached, {} flagged",
            outcome.generated,
            outcome.cached,
            outcome.flagged.len()
        ));
    }
    for f in &outcome.flagged {
        log.line(format!("flagged {}: {}", f.sample_id, f.reason));
    }
    if !outcome.excluded.is_empty() {
        log.line(format!("excluded (no explanation): {}", outcome.excluded.join(", ")));
    }

    write_predictions(&run_dir.join(PREDICTIONS_FILE), &outcome.predictions)?;
    let metrics = RunMetrics {
        run_id: manifest.run_id.clone(),
        experiment: spec.experiment,
        task: spec.task,
        backend_id: manifest.backend_id.clone(),
        strategy: strategy.kind,
        classifier_id: manifest.config.classifier_id.clone(),
        report: outcome.report,
        flagged: outcome.flagged,
        excluded: outcome.excluded,
    };
    write_json(&run_dir.join(METRICS_FILE), &metrics)?;
    log.line(metrics.report.summary());
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        manifest,
        metrics,
        generated: outcome.generated,
        cached: outcome.cached,
    })
}

/// Every file of a run directory, by name. Handy for byte-level comparison.
pub fn snapshot_dir(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, PipelineError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        if entry.path().is_file() {
            let bytes = fs::read(entry.path()).map_err(|e| io_err(&entry.path(), e))?;
            out.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
        }
    }
    Ok(out)
}
