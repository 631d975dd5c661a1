//! Meme datasets: task registry, ingestion of Memotion- and MAMI-shaped
//! tables, label statistics, and seeded stratified splits.
//!
//! Raw tables are delimiter-separated UTF-8 files whose column names are
//! supplied through a [`ColumnMap`]. Once loaded, a [`Corpus`] is immutable
//! and can be written to (and read back from) the canonical JSON-lines
//! format, one [`MemeSample`] per line.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed table: {0}")]
    Table(#[from] csv::Error),
    #[error("column map references absent column `{0}`")]
    MissingColumn(String),
    #[error("row {row} (sample `{sample_id}`): value `{raw}` is not a {task} label")]
    UnknownLabel {
        row: usize,
        sample_id: String,
        task: TaskId,
        raw: String,
    },
    #[error("row {row} (sample `{sample_id}`): indicator `{column}` has non-binary value `{raw}`")]
    NonBinaryIndicator {
        row: usize,
        sample_id: String,
        column: String,
        raw: String,
    },
    #[error("row {row}: duplicate sample id `{sample_id}`")]
    DuplicateSampleId { row: usize, sample_id: String },
    #[error("row {row}: empty image reference")]
    EmptyImageRef { row: usize },
    #[error("{0}: file contains no records")]
    EmptyFile(String),
    #[error("task {0} is not part of this corpus")]
    TaskAbsent(TaskId),
    #[error("test fraction {0} is outside (0, 1)")]
    FractionOutOfRange(f64),
    #[error("cannot split an empty corpus")]
    EmptyCorpus,
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("invalid column map: {0}")]
    ColumnMap(String),
}

/// Several row-level failures gathered during one ingestion pass.
#[derive(Debug, Error)]
#[error("{} row(s) rejected; first: {}", .0.len(), .0[0])]
pub struct RowErrors(pub Vec<CorpusError>);

/// Ingestion either fails structurally or rejects individual rows.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Rows(#[from] RowErrors),
}

impl IngestError {
    /// All underlying errors, flattened for per-row diagnostics.
    pub fn diagnostics(&self) -> Vec<String> {
        match self {
            IngestError::Corpus(e) => vec![e.to_string()],
            IngestError::Rows(rows) => rows.0.iter().map(ToString::to_string).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskId {
    HM,
    SR,
    OF,
    SN,
    MV,
    MG,
    MGT,
}

impl TaskId {
    pub const ALL: [TaskId; 7] = [
        TaskId::HM,
        TaskId::SR,
        TaskId::OF,
        TaskId::SN,
        TaskId::MV,
        TaskId::MG,
        TaskId::MGT,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::HM => "HM",
            TaskId::SR => "SR",
            TaskId::OF => "OF",
            TaskId::SN => "SN",
            TaskId::MV => "MV",
            TaskId::MG => "MG",
            TaskId::MGT => "MGT",
        }
    }

    pub fn dataset(self) -> Dataset {
        match self {
            TaskId::MG | TaskId::MGT => Dataset::Mami,
            _ => Dataset::Memotion,
        }
    }

    /// Human-readable task name used in prompts and reports.
    pub fn description(self) -> &'static str {
        match self {
            TaskId::HM => "humour",
            TaskId::SR => "sarcasm",
            TaskId::OF => "offensiveness",
            TaskId::SN => "sentiment",
            TaskId::MV => "motivation",
            TaskId::MG => "misogyny",
            TaskId::MGT => "misogyny type",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown task `{s}` (expected one of HM, SR, OF, SN, MV, MG, MGT)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dataset {
    Memotion,
    #[serde(rename = "MAMI")]
    Mami,
}

impl Dataset {
    pub fn tasks(self) -> &'static [TaskId] {
        match self {
            Dataset::Memotion => &[TaskId::HM, TaskId::SR, TaskId::OF, TaskId::SN, TaskId::MV],
            Dataset::Mami => &[TaskId::MG, TaskId::MGT],
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dataset::Memotion => f.write_str("Memotion"),
            Dataset::Mami => f.write_str("MAMI"),
        }
    }
}

impl FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "memotion" => Ok(Dataset::Memotion),
            "mami" => Ok(Dataset::Mami),
            other => Err(format!("unknown dataset `{other}` (expected memotion or mami)")),
        }
    }
}

/// Identity and label vocabulary of one classification task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub labels: Vec<String>,
    pub multi_label: bool,
    pub dataset: Dataset,
}

impl TaskSpec {
    /// The registered spec for `task`. Vocabularies are fixed.
    pub fn get(task: TaskId) -> &'static TaskSpec {
        registry()
            .iter()
            .find(|spec| spec.task_id == task)
            .expect("registry covers every task id")
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

fn registry() -> &'static [TaskSpec] {
    use std::sync::OnceLock;
    static REGISTRY: OnceLock<Vec<TaskSpec>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let spec = |task_id: TaskId, labels: &[&str]| TaskSpec {
            task_id,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            multi_label: task_id == TaskId::MGT,
            dataset: task_id.dataset(),
        };
        vec![
            spec(TaskId::HM, &["not_funny", "funny", "very_funny", "hilarious"]),
            spec(
                TaskId::SR,
                &["not_sarcastic", "general", "twisted_meaning", "very_twisted"],
            ),
            spec(
                TaskId::OF,
                &["not_offensive", "slight", "very_offensive", "hateful_offensive"],
            ),
            spec(TaskId::SN, &["positive", "neutral", "negative"]),
            spec(TaskId::MV, &["not_motivational", "motivational"]),
            spec(TaskId::MG, &["misogynous", "non_misogynous"]),
            spec(
                TaskId::MGT,
                &["shaming", "stereotype", "objectification", "violence"],
            ),
        ]
    })
}

/// Lowercase, trim, and fold internal whitespace and hyphens into single
/// underscores. Idempotent.
pub fn normalize_label(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_sep = false;
    for ch in raw.trim().chars() {
        if ch.is_whitespace() || ch == '-' || ch == '_' {
            pending_sep = true;
        } else {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.extend(ch.to_lowercase());
        }
    }
    out
}

/// Gold annotation for one task: a single label, or a (possibly empty) set
/// for multi-label tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Single(String),
    Multi(BTreeSet<String>),
}

impl Gold {
    pub fn as_single(&self) -> Option<&str> {
        match self {
            Gold::Single(label) => Some(label),
            Gold::Multi(_) => None,
        }
    }

    /// Gold as a label set; a single label becomes a singleton.
    pub fn to_set(&self) -> BTreeSet<String> {
        match self {
            Gold::Single(label) => BTreeSet::from([label.clone()]),
            Gold::Multi(set) => set.clone(),
        }
    }

    fn labels(&self) -> Vec<&str> {
        match self {
            Gold::Single(label) => vec![label.as_str()],
            Gold::Multi(set) => set.iter().map(String::as_str).collect(),
        }
    }
}

impl fmt::Display for Gold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gold::Single(label) => f.write_str(label),
            Gold::Multi(set) => {
                let joined: Vec<&str> = set.iter().map(String::as_str).collect();
                write!(f, "{{{}}}", joined.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemeSample {
    pub sample_id: String,
    pub image_ref: String,
    pub caption: String,
    pub gold: BTreeMap<TaskId, Gold>,
}

impl MemeSample {
    pub fn gold_for(&self, task: TaskId) -> Option<&Gold> {
        self.gold.get(&task)
    }

    pub fn caption_words(&self) -> usize {
        self.caption.split_whitespace().count()
    }
}

/// An ordered, immutable collection of samples from one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    dataset: Dataset,
    tasks: Vec<TaskId>,
    samples: Vec<MemeSample>,
}

impl Corpus {
    /// Build a corpus, validating ids, image refs, and gold labels.
    pub fn new(
        dataset: Dataset,
        tasks: Vec<TaskId>,
        samples: Vec<MemeSample>,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (row, sample) in samples.iter().enumerate() {
            if !seen.insert(sample.sample_id.as_str()) {
                return Err(CorpusError::DuplicateSampleId {
                    row: row + 1,
                    sample_id: sample.sample_id.clone(),
                });
            }
            if sample.image_ref.trim().is_empty() {
                return Err(CorpusError::EmptyImageRef { row: row + 1 });
            }
            for &task in &tasks {
                let spec = TaskSpec::get(task);
                let gold = sample.gold.get(&task).ok_or_else(|| CorpusError::Record {
                    line: row + 1,
                    message: format!("sample `{}` has no gold label for {task}", sample.sample_id),
                })?;
                let shape_ok = matches!(
                    (gold, spec.multi_label),
                    (Gold::Single(_), false) | (Gold::Multi(_), true)
                );
                if !shape_ok {
                    return Err(CorpusError::Record {
                        line: row + 1,
                        message: format!("gold for {task} has the wrong arity"),
                    });
                }
                if let Some(bad) = gold.labels().into_iter().find(|l| !spec.contains(l)) {
                    return Err(CorpusError::UnknownLabel {
                        row: row + 1,
                        sample_id: sample.sample_id.clone(),
                        task,
                        raw: bad.to_string(),
                    });
                }
            }
        }
        Ok(Self {
            dataset,
            tasks,
            samples,
        })
    }

    pub fn dataset(&self) -> Dataset {
        self.dataset
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn samples(&self) -> &[MemeSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_task(&self, task: TaskId) -> bool {
        self.tasks.contains(&task)
    }

    pub fn get(&self, sample_id: &str) -> Option<&MemeSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Sub-corpus holding the samples at `indices`, kept in corpus order.
    fn select(&self, indices: &BTreeSet<usize>) -> Corpus {
        Corpus {
            dataset: self.dataset,
            tasks: self.tasks.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Write the canonical JSON-lines form.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        for sample in &self.samples {
            let line = serde_json::to_string(sample).expect("samples always serialize");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    /// Read the canonical JSON-lines form. The dataset and task list are
    /// recovered from the gold keys of the records.
    pub fn read_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut samples = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| CorpusError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: MemeSample =
                serde_json::from_str(&line).map_err(|e| CorpusError::Record {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            samples.push(sample);
        }
        let first = samples
            .first()
            .ok_or_else(|| CorpusError::EmptyFile(path.display().to_string()))?;
        let tasks: Vec<TaskId> = first.gold.keys().copied().collect();
        let dataset = tasks[0].dataset();
        if tasks.iter().any(|t| t.dataset() != dataset) {
            return Err(CorpusError::Record {
                line: 1,
                message: "gold labels mix Memotion and MAMI tasks".into(),
            });
        }
        Corpus::new(dataset, tasks, samples)
    }
}

/// User-supplied mapping from dataset columns to sample fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub dataset: Dataset,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Column holding a unique id; the image reference is used when absent.
    #[serde(default)]
    pub id: Option<String>,
    pub image: String,
    pub caption: String,
    /// Task id → label column. For MAMI the MGT entry is unused; see
    /// `indicators`.
    pub labels: BTreeMap<TaskId, String>,
    /// MGT label → binary indicator column (MAMI only).
    #[serde(default)]
    pub indicators: BTreeMap<String, String>,
    /// Per-task raw-label aliases applied after normalization.
    #[serde(default)]
    pub aliases: BTreeMap<TaskId, BTreeMap<String, String>>,
}

fn default_delimiter() -> char {
    ','
}

impl ColumnMap {
    /// Column names used by the public Memotion distribution. Its five-way
    /// sentiment scale folds into the three task classes through aliases.
    pub fn memotion_default() -> Self {
        let labels = [
            (TaskId::HM, "humour"),
            (TaskId::SR, "sarcasm"),
            (TaskId::OF, "offensive"),
            (TaskId::SN, "overall_sentiment"),
            (TaskId::MV, "motivational"),
        ]
        .into_iter()
        .map(|(t, c)| (t, c.to_string()))
        .collect();
        let sentiment_aliases = [
            ("very_positive", "positive"),
            ("very_negative", "negative"),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        ColumnMap {
            dataset: Dataset::Memotion,
            delimiter: ',',
            id: None,
            image: "image_name".into(),
            caption: "text_corrected".into(),
            labels,
            indicators: BTreeMap::new(),
            aliases: BTreeMap::from([(TaskId::SN, sentiment_aliases)]),
        }
    }

    /// Column names used by the public MAMI distribution (tab separated).
    pub fn mami_default() -> Self {
        ColumnMap {
            dataset: Dataset::Mami,
            delimiter: '\t',
            id: None,
            image: "file_name".into(),
            caption: "Text Transcription".into(),
            labels: BTreeMap::from([(TaskId::MG, "misogynous".to_string())]),
            indicators: ["shaming", "stereotype", "objectification", "violence"]
                .into_iter()
                .map(|l| (l.to_string(), l.to_string()))
                .collect(),
            aliases: BTreeMap::new(),
        }
    }

    pub fn default_for(dataset: Dataset) -> Self {
        match dataset {
            Dataset::Memotion => Self::memotion_default(),
            Dataset::Mami => Self::mami_default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CorpusError> {
        toml::from_str(text).map_err(|e| CorpusError::ColumnMap(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    fn resolve_label(&self, task: TaskId, raw: &str) -> Option<String> {
        let spec = TaskSpec::get(task);
        let norm = normalize_label(raw);
        let norm = self
            .aliases
            .get(&task)
            .and_then(|aliases| {
                aliases
                    .iter()
                    .find(|(from, _)| normalize_label(from) == norm)
                    .map(|(_, to)| normalize_label(to))
            })
            .unwrap_or(norm);
        spec.contains(&norm).then_some(norm)
    }
}

struct Table {
    headers: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path, delimiter: char) -> Result<Self, CorpusError> {
        let delimiter = u8::try_from(delimiter)
            .map_err(|_| CorpusError::ColumnMap(format!("delimiter `{delimiter}` is not ASCII")))?;
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .flexible(false)
            .from_reader(BufReader::new(file));
        let headers = reader
            .headers()?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().trim_start_matches('\u{feff}').to_string(), i))
            .collect::<HashMap<_, _>>();
        let rows = reader.records().collect::<Result<Vec<_>, _>>()?;
        if rows.is_empty() {
            return Err(CorpusError::EmptyFile(path.display().to_string()));
        }
        Ok(Self { headers, rows })
    }

    fn column(&self, name: &str) -> Result<usize, CorpusError> {
        self.headers
            .get(name)
            .copied()
            .ok_or_else(|| CorpusError::MissingColumn(name.to_string()))
    }
}

struct CommonColumns {
    id: Option<usize>,
    image: usize,
    caption: usize,
}

impl CommonColumns {
    fn resolve(table: &Table, map: &ColumnMap) -> Result<Self, CorpusError> {
        Ok(Self {
            id: map.id.as_deref().map(|c| table.column(c)).transpose()?,
            image: table.column(&map.image)?,
            caption: table.column(&map.caption)?,
        })
    }

    fn read(&self, record: &csv::StringRecord, row: usize) -> Result<(String, String, String), CorpusError> {
        let image = record.get(self.image).unwrap_or("").trim().to_string();
        if image.is_empty() {
            return Err(CorpusError::EmptyImageRef { row });
        }
        let id = match self.id {
            Some(col) => record.get(col).unwrap_or("").trim().to_string(),
            None => image.clone(),
        };
        let caption = record.get(self.caption).unwrap_or("").trim().to_string();
        Ok((id, image, caption))
    }
}

/// Load a Memotion-shaped table into a corpus with tasks HM, SR, OF, SN, MV.
pub fn load_memotion(path: &Path, map: &ColumnMap) -> Result<Corpus, IngestError> {
    let tasks = Dataset::Memotion.tasks().to_vec();
    let table = Table::read(path, map.delimiter)?;
    let common = CommonColumns::resolve(&table, map)?;
    let mut task_cols = Vec::new();
    for &task in &tasks {
        let name = map
            .labels
            .get(&task)
            .ok_or_else(|| CorpusError::ColumnMap(format!("no column mapped for {task}")))?;
        task_cols.push((task, table.column(name)?));
    }

    let mut samples = Vec::with_capacity(table.rows.len());
    let mut errors = Vec::new();
    for (i, record) in table.rows.iter().enumerate() {
        let row = i + 1;
        let (sample_id, image_ref, caption) = match common.read(record, row) {
            Ok(fields) => fields,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        let mut gold = BTreeMap::new();
        let mut row_ok = true;
        for &(task, col) in &task_cols {
            let raw = record.get(col).unwrap_or("");
            match map.resolve_label(task, raw) {
                Some(label) => {
                    gold.insert(task, Gold::Single(label));
                }
                None => {
                    row_ok = false;
                    errors.push(CorpusError::UnknownLabel {
                        row,
                        sample_id: sample_id.clone(),
                        task,
                        raw: raw.to_string(),
                    });
                }
            }
        }
        if row_ok {
            samples.push(MemeSample {
                sample_id,
                image_ref,
                caption,
                gold,
            });
        }
    }
    finish(Dataset::Memotion, tasks, samples, errors)
}

/// Load a MAMI-shaped table into a corpus with tasks MG and MGT.
pub fn load_mami(path: &Path, map: &ColumnMap) -> Result<Corpus, IngestError> {
    let tasks = Dataset::Mami.tasks().to_vec();
    let table = Table::read(path, map.delimiter)?;
    let common = CommonColumns::resolve(&table, map)?;
    let mg_name = map
        .labels
        .get(&TaskId::MG)
        .ok_or_else(|| CorpusError::ColumnMap("no column mapped for MG".into()))?;
    let mg_col = table.column(mg_name)?;
    let mgt = TaskSpec::get(TaskId::MGT);
    let mut indicator_cols = Vec::new();
    for label in &mgt.labels {
        let name = map
            .indicators
            .get(label)
            .ok_or_else(|| CorpusError::ColumnMap(format!("no indicator column for `{label}`")))?;
        indicator_cols.push((label.clone(), name.clone(), table.column(name)?));
    }

    let mut samples = Vec::with_capacity(table.rows.len());
    let mut errors = Vec::new();
    for (i, record) in table.rows.iter().enumerate() {
        let row = i + 1;
        let (sample_id, image_ref, caption) = match common.read(record, row) {
            Ok(fields) => fields,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        let mut bit = |column: &str, col: usize| -> Option<bool> {
            let raw = record.get(col).unwrap_or("").trim();
            match raw {
                "0" => Some(false),
                "1" => Some(true),
                _ => {
                    errors.push(CorpusError::NonBinaryIndicator {
                        row,
                        sample_id: sample_id.clone(),
                        column: column.to_string(),
                        raw: raw.to_string(),
                    });
                    None
                }
            }
        };
        let misogynous = bit(mg_name, mg_col);
        let mut types = BTreeSet::new();
        let mut row_ok = misogynous.is_some();
        for (label, name, col) in &indicator_cols {
            match bit(name, *col) {
                Some(true) => {
                    types.insert(label.clone());
                }
                Some(false) => {}
                None => row_ok = false,
            }
        }
        let Some(misogynous) = misogynous.filter(|_| row_ok) else {
            continue;
        };
        let mg = if misogynous { "misogynous" } else { "non_misogynous" };
        if !misogynous {
            types.clear();
        }
        samples.push(MemeSample {
            sample_id,
            image_ref,
            caption,
            gold: BTreeMap::from([
                (TaskId::MG, Gold::Single(mg.to_string())),
                (TaskId::MGT, Gold::Multi(types)),
            ]),
        });
    }
    finish(Dataset::Mami, tasks, samples, errors)
}

/// Dispatch on the column map's dataset.
pub fn load(path: &Path, map: &ColumnMap) -> Result<Corpus, IngestError> {
    match map.dataset {
        Dataset::Memotion => load_memotion(path, map),
        Dataset::Mami => load_mami(path, map),
    }
}

fn finish(
    dataset: Dataset,
    tasks: Vec<TaskId>,
    samples: Vec<MemeSample>,
    errors: Vec<CorpusError>,
) -> Result<Corpus, IngestError> {
    if !errors.is_empty() {
        return Err(RowErrors(errors).into());
    }
    Ok(Corpus::new(dataset, tasks, samples)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelStats {
    pub label: String,
    pub count: usize,
    /// Mean whitespace-token count of captions carrying this label.
    pub avg_caption_words: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub task: TaskId,
    pub samples: usize,
    pub labels: Vec<LabelStats>,
}

impl DatasetStats {
    pub fn get(&self, label: &str) -> Option<&LabelStats> {
        self.labels.iter().find(|l| l.label == label)
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.labels.iter().map(|l| l.label.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{} ({})", self.task, self.task.description())?;
        for l in &self.labels {
            writeln!(
                f,
                "  {:<width$}  {:>7}  {:>6.2}",
                l.label,
                l.count,
                text::round_half_away(l.avg_caption_words, 2)
            )?;
        }
        Ok(())
    }
}

/// Per-label sample counts and mean caption length (in words) for `task`.
pub fn compute_stats(corpus: &Corpus, task: TaskId) -> Result<DatasetStats, CorpusError> {
    if !corpus.has_task(task) {
        return Err(CorpusError::TaskAbsent(task));
    }
    let spec = TaskSpec::get(task);
    let mut counts = vec![0usize; spec.labels.len()];
    let mut words = vec![0usize; spec.labels.len()];
    let mut carrying = 0;
    for sample in corpus.samples() {
        let Some(gold) = sample.gold_for(task) else {
            continue;
        };
        carrying += 1;
        for label in gold.labels() {
            let idx = spec.label_index(label).expect("corpus gold is validated");
            counts[idx] += 1;
            words[idx] += sample.caption_words();
        }
    }
    let labels = spec
        .labels
        .iter()
        .enumerate()
        .map(|(i, label)| LabelStats {
            label: label.clone(),
            count: counts[i],
            avg_caption_words: if counts[i] == 0 {
                0.0
            } else {
                words[i] as f64 / counts[i] as f64
            },
        })
        .collect();
    Ok(DatasetStats {
        task,
        samples: carrying,
        labels,
    })
}

/// Stratification key of a sample under `task`: its label, or for
/// multi-label gold the first label in vocabulary order (empty sets share
/// one bucket).
fn strata_key(spec: &TaskSpec, gold: Option<&Gold>) -> usize {
    match gold {
        Some(Gold::Single(label)) => spec.label_index(label).unwrap_or(spec.labels.len()),
        Some(Gold::Multi(set)) => spec
            .labels
            .iter()
            .position(|l| set.contains(l))
            .unwrap_or(spec.labels.len()),
        None => spec.labels.len(),
    }
}

/// Seeded split into `(train, test)`, stratified on the corpus's first task.
///
/// The test size is `round(n * test_fraction)` clamped to `[1, n - 1]` when
/// `n >= 2`; per-stratum quotas use largest remainders so the total is exact.
pub fn split(corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<(Corpus, Corpus), CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::FractionOutOfRange(test_fraction));
    }
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let n = corpus.len();
    let mut n_test = (n as f64 * test_fraction).round() as usize;
    if n >= 2 {
        n_test = n_test.clamp(1, n - 1);
    }

    let primary = corpus.tasks()[0];
    let spec = TaskSpec::get(primary);
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, sample) in corpus.samples().iter().enumerate() {
        strata
            .entry(strata_key(spec, sample.gold_for(primary)))
            .or_default()
            .push(i);
    }

    // Largest-remainder apportionment; ties go to the earlier stratum.
    let mut quotas: Vec<(usize, usize, f64)> = strata
        .iter()
        .map(|(&key, members)| {
            let exact = members.len() as f64 * n_test as f64 / n as f64;
            (key, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(n_test - assigned) {
        quotas[i].1 += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_idx = BTreeSet::new();
    for (key, quota, _) in quotas {
        let mut members = strata[&key].clone();
        members.shuffle(&mut rng);
        test_idx.extend(members.into_iter().take(quota));
    }
    let train_idx: BTreeSet<usize> = (0..n).filter(|i| !test_idx.contains(i)).collect();
    Ok((corpus.select(&train_idx), corpus.select(&test_idx)))
}
