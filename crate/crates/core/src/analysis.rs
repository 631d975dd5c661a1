//! Results-table aggregation, relative gains, SOTA deltas, and the
//! explanation-quality score difference between correctly and incorrectly
//! classified samples.
//!
//! Cells are weighted F1 in percent. Aggregation runs on unrounded values;
//! only presentation rounds (half away from zero, two decimals).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskId;
use crate::metrics::{MetricsError, SemanticScorer};
use crate::pipeline::{ExplanationStore, PredictionRecord};
use crate::text::round_half_away;

/// Shipped comparison scores.
pub const DEFAULT_SOTA: &str = include_str!("../data/sota.toml");

/// Shipped published results grids with their known discrepancies.
pub const REFERENCE_TABLES: &str = include_str!("../data/reference_tables.toml");

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("row {row} has no cell for column {column}")]
    MissingCell { row: String, column: String },
    #[error("row {row} has two cells for column {column}")]
    DuplicateCell { row: String, column: String },
    #[error("no results to aggregate")]
    EmptyResults,
    #[error("relative gain over a zero base is undefined")]
    ZeroBase,
    #[error("task {0} is missing from the SOTA table")]
    TaskMissingFromSota(TaskId),
    #[error("no reference text for sample(s): {}", .0.join(", "))]
    MissingReference(Vec<String>),
    #[error("no stored explanation for sample(s): {}", .0.join(", "))]
    MissingExplanation(Vec<String>),
    #[error("bad column `{0}` (expected TASK or TASK/SUB)")]
    BadColumn(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

/// A results column: a task, optionally split by a sub-column such as the
/// classifier that produced the score.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnKey {
    pub task: TaskId,
    pub sub: Option<String>,
}

impl ColumnKey {
    pub fn task(task: TaskId) -> Self {
        Self { task, sub: None }
    }
}

impl fmt::Display for ColumnKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.sub {
            Some(sub) => write!(f, "{}/{sub}", self.task),
            None => write!(f, "{}", self.task),
        }
    }
}

impl FromStr for ColumnKey {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AnalysisError::BadColumn(s.to_string());
        let (task, sub) = match s.split_once('/') {
            Some((t, sub)) if !sub.is_empty() => (t, Some(sub.to_string())),
            Some(_) => return Err(bad()),
            None => (s, None),
        };
        Ok(ColumnKey {
            task: task.parse().map_err(|_| bad())?,
            sub,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub model: String,
    pub strategy: String,
}

impl fmt::Display for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.model, self.strategy)
    }
}

/// One (model, strategy, column, score) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub model: String,
    pub strategy: String,
    pub column: ColumnKey,
    /// Weighted F1 in percent.
    pub f1: f64,
}

impl ResultEntry {
    pub fn new(model: &str, strategy: &str, task: TaskId, f1: f64) -> Self {
        Self {
            model: model.to_string(),
            strategy: strategy.to_string(),
            column: ColumnKey::task(task),
            f1,
        }
    }

    pub fn with_sub(mut self, sub: &str) -> Self {
        self.column.sub = Some(sub.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub key: RowKey,
    pub cells: Vec<Option<f64>>,
    /// Mean of the present cells.
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub columns: Vec<ColumnKey>,
    pub rows: Vec<TableRow>,
    pub column_avg: Vec<Option<f64>>,
    /// Sample standard deviation (n − 1); `None` below two rows.
    pub column_std: Vec<Option<f64>>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Build a results table. Rows and sub-columns keep first-appearance order;
/// columns are grouped by task. A row that covers a task must have every
/// sub-column of that task.
pub fn aggregate(entries: &[ResultEntry]) -> Result<ResultsTable, AnalysisError> {
    if entries.is_empty() {
        return Err(AnalysisError::EmptyResults);
    }
    let mut columns: Vec<ColumnKey> = Vec::new();
    let mut row_keys: Vec<RowKey> = Vec::new();
    for e in entries {
        if !columns.contains(&e.column) {
            columns.push(e.column.clone());
        }
        let key = RowKey {
            model: e.model.clone(),
            strategy: e.strategy.clone(),
        };
        if !row_keys.contains(&key) {
            row_keys.push(key);
        }
    }
    // Stable sort keeps sub-column order within a task.
    columns.sort_by_key(|c| c.task);
    let col_index: HashMap<&ColumnKey, usize> = columns.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let row_index: HashMap<&RowKey, usize> = row_keys.iter().enumerate().map(|(i, r)| (r, i)).collect();

    let mut grid = vec![vec![None; columns.len()]; row_keys.len()];
    for e in entries {
        let key = RowKey {
            model: e.model.clone(),
            strategy: e.strategy.clone(),
        };
        let (r, c) = (row_index[&key], col_index[&e.column]);
        if grid[r][c].is_some() {
            return Err(AnalysisError::DuplicateCell {
                row: key.to_string(),
                column: e.column.to_string(),
            });
        }
        grid[r][c] = Some(e.f1);
    }

    let mut rows = Vec::with_capacity(row_keys.len());
    for (key, cells) in row_keys.into_iter().zip(grid) {
        for (c, col) in columns.iter().enumerate() {
            let covers_task = columns
                .iter()
                .zip(&cells)
                .any(|(other, cell)| other.task == col.task && cell.is_some());
            if covers_task && cells[c].is_none() {
                return Err(AnalysisError::MissingCell {
                    row: key.to_string(),
                    column: col.to_string(),
                });
            }
        }
        let present: Vec<f64> = cells.iter().flatten().copied().collect();
        rows.push(TableRow {
            key,
            avg: mean(&present).expect("every row has at least one cell"),
            cells,
        });
    }
    let column_values = |c: usize| -> Vec<f64> { rows.iter().filter_map(|r| r.cells[c]).collect() };
    let column_avg = (0..columns.len()).map(|c| mean(&column_values(c))).collect();
    let column_std = (0..columns.len()).map(|c| sample_std(&column_values(c))).collect();
    Ok(ResultsTable {
        columns,
        rows,
        column_avg,
        column_std,
    })
}

impl ResultsTable {
    pub fn row(&self, model: &str, strategy: &str) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.key.model == model && r.key.strategy == strategy)
    }

    pub fn column_index(&self, column: &ColumnKey) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        let mut tasks: Vec<TaskId> = self.columns.iter().map(|c| c.task).collect();
        tasks.dedup();
        tasks
    }

    /// Best cell for `task` across every row and sub-column.
    pub fn best(&self, task: TaskId) -> Option<(f64, &RowKey, &ColumnKey)> {
        let mut best: Option<(f64, &RowKey, &ColumnKey)> = None;
        for (c, col) in self.columns.iter().enumerate().filter(|(_, c)| c.task == task) {
            for row in &self.rows {
                if let Some(v) = row.cells[c] {
                    if best.map_or(true, |(b, _, _)| v > b) {
                        best = Some((v, &row.key, col));
                    }
                }
            }
        }
        best
    }

    /// Aligned plain-text rendering with `Avg.`, `Std.` (when any column has
    /// two or more rows) and, given a SOTA table, `SOTA Δ` rows.
    pub fn render_text(&self, sota: Option<&SotaTable>) -> String {
        let fmt2 = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", round_half_away(v, 2)));
        let mut lines: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["Model".to_string(), "Strategy".to_string()];
        header.extend(self.columns.iter().map(ToString::to_string));
        header.push("Avg".to_string());
        lines.push(header);
        for row in &self.rows {
            let mut line = vec![row.key.model.clone(), row.key.strategy.clone()];
            line.extend(row.cells.iter().map(|c| fmt2(*c)));
            line.push(fmt2(Some(row.avg)));
            lines.push(line);
        }
        let summary = |label: &str, values: Vec<Option<f64>>| {
            let mut line = vec![label.to_string(), String::new()];
            line.extend(values.into_iter().map(fmt2));
            line.push(String::new());
            line
        };
        lines.push(summary("Avg.", self.column_avg.clone()));
        if self.column_std.iter().any(Option::is_some) {
            lines.push(summary("Std.", self.column_std.clone()));
        }
        if let Some(sota) = sota {
            if let Ok(deltas) = sota_delta(self, sota) {
                let by_task: HashMap<TaskId, f64> = deltas.iter().map(|d| (d.task_id, d.delta)).collect();
                // One delta per task, shown under the task's first column.
                let mut shown = Vec::new();
                let values = self
                    .columns
                    .iter()
                    .map(|c| {
                        if shown.contains(&c.task) {
                            None
                        } else {
                            shown.push(c.task);
                            by_task.get(&c.task).copied()
                        }
                    })
                    .collect();
                lines.push(summary("SOTA Δ", values));
            }
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &lines {
            let cells: Vec<String> = line
                .iter()
                .enumerate()
                .map(|(i, cell)| {
                    let pad = widths[i] - cell.chars().count();
                    if i < 2 {
                        format!("{cell}{}", " ".repeat(pad))
                    } else {
                        format!("{}{cell}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// `100 · (new − base) / base`.
pub fn relative_gain(new: f64, base: f64) -> Result<f64, AnalysisError> {
    if base == 0.0 {
        return Err(AnalysisError::ZeroBase);
    }
    Ok(100.0 * (new - base) / base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub task_id: TaskId,
    pub new_score: f64,
    pub base_score: f64,
    pub relative_gain_percent: f64,
}

impl GainReport {
    pub fn new(task_id: TaskId, new_score: f64, base_score: f64) -> Result<Self, AnalysisError> {
        Ok(Self {
            task_id,
            new_score,
            base_score,
            relative_gain_percent: relative_gain(new_score, base_score)?,
        })
    }
}

impl fmt::Display for GainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {:.2} vs {:.2} -> {:+.2}%",
            self.task_id,
            round_half_away(self.new_score, 2),
            round_half_away(self.base_score, 2),
            round_half_away(self.relative_gain_percent, 2)
        )
    }
}

/// Relative gain of each task's best cell in `new` over its best cell in
/// `base`, for tasks present in both.
pub fn best_cell_gains(new: &ResultsTable, base: &ResultsTable) -> Result<Vec<GainReport>, AnalysisError> {
    new.tasks()
        .into_iter()
        .filter_map(|t| Some((t, new.best(t)?.0, base.best(t)?.0)))
        .map(|(t, n, b)| GainReport::new(t, n, b))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SotaEntry {
    pub score: f64,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SotaTable {
    pub version: u32,
    pub tasks: BTreeMap<TaskId, SotaEntry>,
}

impl SotaTable {
    pub fn bundled() -> Self {
        Self::from_toml_str(DEFAULT_SOTA).expect("shipped sota.toml parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, AnalysisError> {
        toml::from_str(text).map_err(|e| AnalysisError::File {
            path: "<sota>".into(),
            message: e.to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, AnalysisError> {
        let file_err = |message: String| AnalysisError::File {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        toml::from_str(&text).map_err(|e: toml::de::Error| file_err(e.to_string()))
    }

    pub fn get(&self, task: TaskId) -> Option<&SotaEntry> {
        self.tasks.get(&task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SotaDelta {
    pub task_id: TaskId,
    pub best: f64,
    pub sota: f64,
    /// `best − sota`, signed.
    pub delta: f64,
    pub best_row: RowKey,
    pub best_column: ColumnKey,
}

/// Best cell minus the SOTA score, per task of `table`.
pub fn sota_delta(table: &ResultsTable, sota: &SotaTable) -> Result<Vec<SotaDelta>, AnalysisError> {
    table
        .tasks()
        .into_iter()
        .map(|task| {
            let entry = sota.get(task).ok_or(AnalysisError::TaskMissingFromSota(task))?;
            let (best, row, col) = table.best(task).expect("table tasks have cells");
            Ok(SotaDelta {
                task_id: task,
                best,
                sota: entry.score,
                delta: best - entry.score,
                best_row: row.clone(),
                best_column: col.clone(),
            })
        })
        .collect()
}

/// Relative gain of each task's best cell over SOTA.
pub fn sota_gains(table: &ResultsTable, sota: &SotaTable) -> Result<Vec<GainReport>, AnalysisError> {
    sota_delta(table, sota)?
        .into_iter()
        .map(|d| GainReport::new(d.task_id, d.best, d.sota))
        .collect()
}

/// Source of silver reference explanations, keyed by sample id.
pub trait ReferenceProvider {
    fn reference(&self, sample_id: &str) -> Option<&str>;
}

impl ReferenceProvider for BTreeMap<String, String> {
    fn reference(&self, sample_id: &str) -> Option<&str> {
        self.get(sample_id).map(String::as_str)
    }
}

impl ReferenceProvider for HashMap<String, String> {
    fn reference(&self, sample_id: &str) -> Option<&str> {
        self.get(sample_id).map(String::as_str)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceLine {
    sample_id: String,
    reference: String,
}

/// Read `{"sample_id": ..., "reference": ...}` lines.
pub fn load_references(path: &Path) -> Result<BTreeMap<String, String>, AnalysisError> {
    let file_err = |message: String| AnalysisError::File {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: ReferenceLine = serde_json::from_str(line).map_err(|e| file_err(format!("line {}: {e}", i + 1)))?;
        out.insert(r.sample_id, r.reference);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDiffReport {
    pub task_id: TaskId,
    pub scorer_id: String,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub mean_score_correct: Option<f64>,
    pub mean_score_incorrect: Option<f64>,
    /// `mean_correct − mean_incorrect`; `None` when a group is empty.
    pub difference: Option<f64>,
    /// Set when the difference is undefined.
    pub flag: Option<String>,
}

impl fmt::Display for ScoreDiffReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fmt4 = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        write!(
            f,
            "{} [{}] correct n={} mean={} | incorrect n={} mean={} | difference={}",
            self.task_id,
            self.scorer_id,
            self.n_correct,
            fmt4(self.mean_score_correct),
            self.n_incorrect,
            fmt4(self.mean_score_incorrect),
            fmt4(self.difference)
        )?;
        if let Some(flag) = &self.flag {
            write!(f, " ({flag})")?;
        }
        Ok(())
    }
}

/// Mean semantic score of explanations for correctly versus incorrectly
/// classified samples, per task.
///
/// The explanation of a prediction is the store record its
/// `raw_output_ref` points at. Input order does not affect the result.
pub fn score_diff_analysis(
    predictions: &[PredictionRecord],
    explanations: &ExplanationStore,
    references: &dyn ReferenceProvider,
    scorer: &dyn SemanticScorer,
) -> Result<Vec<ScoreDiffReport>, AnalysisError> {
    let mut sorted: Vec<&PredictionRecord> = predictions.iter().collect();
    sorted.sort_by(|a, b| (a.task_id, &a.sample_id).cmp(&(b.task_id, &b.sample_id)));

    let missing_ref: Vec<String> = sorted
        .iter()
        .filter(|p| references.reference(&p.sample_id).is_none())
        .map(|p| p.sample_id.clone())
        .collect();
    if !missing_ref.is_empty() {
        return Err(AnalysisError::MissingReference(missing_ref));
    }
    let explanation_of = |p: &PredictionRecord| {
        p.raw_output_ref
            .as_ref()
            .and_then(|k| explanations.get(k))
            .map(|r| r.explanation.as_str())
    };
    let missing_expl: Vec<String> = sorted
        .iter()
        .filter(|p| explanation_of(p).is_none())
        .map(|p| p.sample_id.clone())
        .collect();
    if !missing_expl.is_empty() {
        return Err(AnalysisError::MissingExplanation(missing_expl));
    }

    let mut groups: BTreeMap<TaskId, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for p in sorted {
        let explanation = explanation_of(p).expect("checked above");
        let reference = references.reference(&p.sample_id).expect("checked above");
        let s = scorer.score(explanation, reference)?;
        let entry = groups.entry(p.task_id).or_default();
        if p.is_correct() {
            entry.0.push(s);
        } else {
            entry.1.push(s);
        }
    }
    Ok(groups
        .into_iter()
        .map(|(task_id, (correct, incorrect))| {
            let mc = mean(&correct);
            let mi = mean(&incorrect);
            let flag = match (correct.is_empty(), incorrect.is_empty()) {
                (true, _) => Some("no correctly classified samples".to_string()),
                (_, true) => Some("no incorrectly classified samples".to_string()),
                _ => None,
            };
            ScoreDiffReport {
                task_id,
                scorer_id: scorer.scorer_id().to_string(),
                n_correct: correct.len(),
                n_incorrect: incorrect.len(),
                mean_score_correct: mc,
                mean_score_incorrect: mi,
                difference: mc.zip(mi).map(|(a, b)| a - b),
                flag,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyKind {
    RowAvg,
    ColumnAvg,
    ColumnStd,
}

/// A published summary entry that recomputation does not reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub kind: DiscrepancyKind,
    /// `MODEL/STRATEGY` for rows, the column label otherwise.
    pub key: String,
    pub published: f64,
    pub recomputed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublishedRow {
    pub model: String,
    pub strategy: String,
    pub cells: Vec<f64>,
    pub avg: f64,
}

/// A published results grid with its printed summary rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublishedTable {
    pub name: String,
    pub title: String,
    pub columns: Vec<String>,
    pub column_avg: Vec<f64>,
    pub column_std: Vec<f64>,
    pub rows: Vec<PublishedRow>,
    /// Known mismatches between printed and recomputed summaries.
    #[serde(default)]
    pub discrepancies: Vec<Discrepancy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublishedTables {
    pub version: u32,
    pub tables: Vec<PublishedTable>,
}

impl PublishedTables {
    pub fn bundled() -> Self {
        toml::from_str(REFERENCE_TABLES).expect("shipped reference_tables.toml parses")
    }

    pub fn get(&self, name: &str) -> Option<&PublishedTable> {
        self.tables.iter().find(|t| t.name == name)
    }
}

/// Tolerance for comparing a two-decimal published value with a
/// recomputation rounded the same way.
pub const PUBLISHED_TOLERANCE: f64 = 0.01 + 1e-9;

impl PublishedTable {
    pub fn entries(&self) -> Result<Vec<ResultEntry>, AnalysisError> {
        let columns: Vec<ColumnKey> = self.columns.iter().map(|c| c.parse()).collect::<Result<_, _>>()?;
        Ok(self
            .rows
            .iter()
            .flat_map(|row| {
                columns.iter().zip(&row.cells).map(|(col, &f1)| ResultEntry {
                    model: row.model.clone(),
                    strategy: row.strategy.clone(),
                    column: col.clone(),
                    f1,
                })
            })
            .collect())
    }

    pub fn aggregate(&self) -> Result<ResultsTable, AnalysisError> {
        aggregate(&self.entries()?)
    }

    /// Recompute every printed summary entry and list the ones that differ
    /// by more than [`PUBLISHED_TOLERANCE`] after two-decimal rounding.
    pub fn check(&self) -> Result<Vec<Discrepancy>, AnalysisError> {
        let table = self.aggregate()?;
        let off = |published: f64, recomputed: f64| (round_half_away(recomputed, 2) - published).abs() > PUBLISHED_TOLERANCE;
        let mut out = Vec::new();
        for row in &self.rows {
            let got = table.row(&row.model, &row.strategy).expect("row aggregated").avg;
            if off(row.avg, got) {
                out.push(Discrepancy {
                    kind: DiscrepancyKind::RowAvg,
                    key: format!("{}/{}", row.model, row.strategy),
                    published: row.avg,
                    recomputed: got,
                });
            }
        }
        for (i, col) in self.columns.iter().enumerate() {
            let idx = table.column_index(&col.parse()?).expect("column aggregated");
            let checks = [
                (DiscrepancyKind::ColumnAvg, self.column_avg.get(i), table.column_avg[idx]),
                (DiscrepancyKind::ColumnStd, self.column_std.get(i), table.column_std[idx]),
            ];
            for (kind, published, got) in checks {
                if let (Some(&published), Some(got)) = (published, got) {
                    if off(published, got) {
                        out.push(Discrepancy {
                            kind,
                            key: col.clone(),
                            published,
                            recomputed: got,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}
