//! Command-line driver: `ingest`, `run`, and `report`.
//!
//! Exit codes: 0 success, 2 input error (unreadable or invalid inputs,
//! unknown flags), 3 run failure (unsupported strategy, aborted run,
//! backend errors). Remote backends read a bearer token from the
//! environment variable named by [`crate::backends::CREDENTIALS_ENV`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, aggregate, best_cell_gains, load_references, score_diff_analysis, sota_delta, sota_gains, GainReport,
    ResultEntry, ResultsTable, ScoreDiffReport, SotaDelta, SotaTable,
};
use crate::backends::{BackendError, BackendKind, BackendSpec};
use crate::corpus::{self, ColumnMap, Corpus, Dataset, TaskId};
use crate::metrics::TfCosineScorer;
use crate::pipeline::{
    self, Clock, ExplanationStore, Experiment, MultiLabelMode, PipelineError, RunManifest, RunMetrics, RunSpec,
    Runtime, EXPLANATIONS_FILE, MANIFEST_FILE,
};
use crate::prompting::{PromptTemplateSet, StrategyKind};
use crate::synthetic;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUN: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "memescope", version, about = "Meme classification experiments with vision-language backends")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a raw dataset, write the canonical corpus, and print label statistics.
    Ingest(IngestArgs),
    /// Run one experiment into a run directory.
    Run(Box<RunArgs>),
    /// Aggregate run directories into results tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw dataset file (CSV/TSV).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Column map (TOML); defaults to the public layout of --format.
    #[arg(long)]
    pub column_map: Option<PathBuf>,
    /// Dataset layout when no column map is given.
    #[arg(long, default_value = "memotion")]
    pub format: Dataset,
    /// Output path of the canonical JSON-lines corpus.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Base configuration file (TOML, unknown keys rejected). Flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replay the configuration stored in a previous run's manifest.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    /// Dataset: a canonical .jsonl corpus or a raw table. A seeded synthetic
    /// Memotion corpus is used when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub column_map: Option<PathBuf>,
    /// Layout of a raw --dataset without column map.
    #[arg(long)]
    pub format: Option<Dataset>,
    /// Size of the synthetic corpus used without --dataset.
    #[arg(long)]
    pub synthetic_size: Option<usize>,
    #[arg(long, value_parser = ["exp1", "exp2", "exp3"])]
    pub exp: Option<String>,
    #[arg(long)]
    pub task: Option<TaskId>,
    /// Built-in backend (mock, mock-trainable, ib-like, lm-like) or a
    /// backend_id from --backend-config.
    #[arg(long)]
    pub backend: Option<String>,
    /// TOML file with [[backends]] plugin entries.
    #[arg(long)]
    pub backend_config: Option<PathBuf>,
    #[arg(long, value_parser = ["zs", "zsc", "fs", "fsc"])]
    pub strategy: Option<String>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Prompt template file (TOML).
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Requested generation fan-out (capped by the backend).
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
    /// Adapter rank (exp2).
    #[arg(long)]
    pub rank: Option<i64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<i64>,
    /// Prepend the caption to explanations before classification (exp3).
    #[arg(long)]
    pub append_caption: bool,
    /// Fail when explanations are missing instead of excluding samples (exp3).
    #[arg(long)]
    pub strict_explanations: bool,
    /// Parse one label for multi-label tasks.
    #[arg(long)]
    pub forced_single: bool,
    /// Abort when more than this fraction of samples fail.
    #[arg(long)]
    pub abort_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to aggregate.
    #[arg(required = true)]
    pub run_dirs: Vec<PathBuf>,
    /// SOTA scores (TOML); the shipped table is used when absent.
    #[arg(long)]
    pub sota_file: Option<PathBuf>,
    /// Silver reference explanations (JSON lines) for the score-difference analysis.
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Everything that determines a run. Serialized into the run manifest,
/// without the run directory and concurrency, which do not affect outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub column_map: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<Dataset>,
    #[serde(default = "default_synthetic_size")]
    pub synthetic_size: usize,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub backends: Vec<BackendSpec>,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    pub run: RunSpec,
}

fn default_synthetic_size() -> usize {
    50
}
fn default_backend() -> String {
    "mock".to_string()
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    fn run(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUN,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Corpus(_)
            | PipelineError::Io { .. }
            | PipelineError::Record { .. }
            | PipelineError::Prompt(_)
            | PipelineError::TaskNotInCorpus(_)
            | PipelineError::Backend(BackendError::InvalidHyperparameter { .. })
            | PipelineError::Backend(BackendError::Config(_)) => CliError::input(e.to_string()),
            _ => CliError::run(e.to_string()),
        }
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

impl CliConfig {
    /// Resolve flags over an optional base configuration.
    pub fn from_args(args: &RunArgs) -> Result<Self, CliError> {
        let mut cfg = if let Some(path) = &args.manifest {
            let manifest: RunManifest = serde_json::from_str(
                &fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?,
            )
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            let inputs = manifest
                .inputs
                .ok_or_else(|| CliError::input(format!("{}: manifest records no inputs", path.display())))?;
            serde_json::from_value(inputs).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
        } else if let Some(path) = &args.config {
            read_toml::<CliConfig>(path)?
        } else {
            let exp = args
                .exp
                .as_deref()
                .ok_or_else(|| CliError::input("--exp is required without --config or --manifest"))?;
            let task = args
                .task
                .ok_or_else(|| CliError::input("--task is required without --config or --manifest"))?;
            CliConfig {
                dataset: None,
                column_map: None,
                format: None,
                synthetic_size: default_synthetic_size(),
                backend: default_backend(),
                backends: Vec::new(),
                templates: None,
                run: RunSpec::new(exp.parse().map_err(CliError::input)?, task, StrategyKind::ZS),
            }
        };
        if let Some(exp) = &args.exp {
            cfg.run.experiment = exp.parse().map_err(CliError::input)?;
        }
        if let Some(task) = args.task {
            cfg.run.task = task;
        }
        if let Some(s) = &args.strategy {
            cfg.run.strategy = s.parse().map_err(CliError::input)?;
        }
        macro_rules! take {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = args.$flag.clone() { $field = v.into(); })*
            };
        }
        take!(
            dataset => cfg.dataset,
            column_map => cfg.column_map,
            format => cfg.format,
            synthetic_size => cfg.synthetic_size,
            backend => cfg.backend,
            templates => cfg.templates,
            shots => cfg.run.shots,
            seed => cfg.run.seed,
            test_fraction => cfg.run.test_fraction,
            abort_fraction => cfg.run.abort_fraction,
            rank => cfg.run.finetune.rank,
            alpha => cfg.run.finetune.alpha,
            learning_rate => cfg.run.finetune.learning_rate,
            epochs => cfg.run.finetune.epochs,
        );
        if let Some(path) = &args.backend_config {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct BackendFile {
                backends: Vec<BackendSpec>,
            }
            cfg.backends.extend(read_toml::<BackendFile>(path)?.backends);
        }
        cfg.run.append_caption |= args.append_caption;
        cfg.run.strict_explanations |= args.strict_explanations;
        if args.forced_single {
            cfg.run.multilabel_mode = MultiLabelMode::ForcedSingle;
        }
        Ok(cfg)
    }

    pub fn backend_spec(&self) -> Result<BackendSpec, CliError> {
        self.backends
            .iter()
            .find(|b| b.backend_id == self.backend)
            .cloned()
            .or_else(|| BackendSpec::builtin(&self.backend))
            .ok_or_else(|| CliError::input(format!("unknown backend `{}`", self.backend)))
    }

    pub fn templates(&self) -> Result<PromptTemplateSet, CliError> {
        match &self.templates {
            Some(path) => PromptTemplateSet::from_file(path).map_err(|e| CliError::input(format!("{}: {e}", path.display()))),
            None => Ok(PromptTemplateSet::default_set()),
        }
    }

    pub fn corpus(&self) -> Result<Corpus, CliError> {
        let Some(path) = &self.dataset else {
            return Ok(synthetic::memotion(self.synthetic_size, self.run.seed));
        };
        if path.extension().is_some_and(|e| e == "jsonl") {
            return Corpus::read_jsonl(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())));
        }
        let map = self.column_map()?;
        corpus::load(path, &map).map_err(|e| CliError::input(e.diagnostics().join("\n")))
    }

    fn column_map(&self) -> Result<ColumnMap, CliError> {
        match &self.column_map {
            Some(p) => ColumnMap::from_file(p).map_err(|e| CliError::input(format!("{}: {e}", p.display()))),
            None => Ok(ColumnMap::default_for(self.format.unwrap_or(Dataset::Memotion))),
        }
    }
}

/// Parse `args` (including the program name) and execute.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(rendered.as_bytes())
            } else {
                out.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Ingest(args) => cmd_ingest(&args, out),
        Command::Run(args) => cmd_run(&args, out),
        Command::Report(args) => cmd_report(&args, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::input(format!("stdout: {e}")))
}

pub fn cmd_ingest(args: &IngestArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let map = match &args.column_map {
        Some(p) => ColumnMap::from_file(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?,
        None => ColumnMap::default_for(args.format),
    };
    let corpus = corpus::load(&args.dataset, &map).map_err(|e| {
        let diags = e.diagnostics();
        CliError::input(format!("{}: ingestion failed\n  {}", args.dataset.display(), diags.join("\n  ")))
    })?;
    corpus
        .write_jsonl(&args.out)
        .map_err(|e| CliError::input(format!("{}: {e}", args.out.display())))?;
    let mut text = format!(
        "{} samples ({}) written to {}\n",
        corpus.len(),
        corpus.dataset(),
        args.out.display()
    );
    for &task in corpus.tasks() {
        let stats = corpus::compute_stats(&corpus, task).map_err(|e| CliError::input(e.to_string()))?;
        text.push_str(&stats.to_string());
    }
    write_out(out, &text)
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = CliConfig::from_args(args)?;
    let spec = cfg.backend_spec()?;
    let templates = cfg.templates()?;
    let corpus = cfg.corpus()?;
    let mut backend = spec.build().map_err(|e| CliError::input(e.to_string()))?;
    let run_dir = args.run_dir.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "{}-{}-{}-{}-s{}",
            cfg.run.experiment.to_string().to_lowercase(),
            cfg.run.task,
            cfg.backend,
            cfg.run.strategy.to_string().to_lowercase(),
            cfg.run.seed
        ))
    });
    let runtime = Runtime {
        concurrency: args.concurrency.max(1),
        clock: if spec.kind == BackendKind::Mock {
            Clock::Fixed(0)
        } else {
            Clock::System
        },
        ..Runtime::default()
    };
    let inputs = serde_json::to_value(&cfg).map_err(|e| CliError::input(e.to_string()))?;
    let mut run_spec = cfg.run.clone();
    run_spec.generation = if cfg.run.generation == Default::default() {
        spec.generation.clone()
    } else {
        cfg.run.generation.clone()
    };
    let summary = pipeline::run_experiment(&run_spec, &corpus, backend.as_mut(), &templates, &run_dir, &runtime, Some(inputs))
        .map_err(|e| {
            let mut e = CliError::from(e);
            if run_dir.join(MANIFEST_FILE).exists() {
                e.message.push_str(&format!("\nmanifest: {}", run_dir.join(MANIFEST_FILE).display()));
            }
            e
        })?;
    write_out(
        out,
        &format!(
            "manifest: {}\n{} {} {} {}: {}\n",
            summary.run_dir.join(MANIFEST_FILE).display(),
            summary.manifest.experiment,
            summary.manifest.tasks[0],
            summary.manifest.backend_id,
            summary.manifest.strategy,
            summary.metrics.report.summary()
        ),
    )
}

/// Row label of a run in its experiment's table.
fn strategy_label(m: &RunMetrics) -> String {
    match m.experiment {
        Experiment::Exp2 => "adapter".to_string(),
        _ => m.strategy.to_string(),
    }
}

/// Machine-readable report.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub tables: Vec<ExperimentTable>,
    /// Best-cell gains of EXP2 and EXP3 over EXP1.
    pub gains_over_prompting: BTreeMap<Experiment, Vec<GainReport>>,
    pub score_differences: Vec<RunScoreDiff>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentTable {
    pub experiment: Experiment,
    pub table: ResultsTable,
    pub sota_delta: Vec<SotaDelta>,
    pub sota_gains: Vec<GainReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunScoreDiff {
    pub run_dir: PathBuf,
    pub reports: Vec<ScoreDiffReport>,
}

/// Build the report for `run_dirs`.
pub fn build_report(
    run_dirs: &[PathBuf],
    sota: &SotaTable,
    references: Option<&BTreeMap<String, String>>,
) -> Result<Report, CliError> {
    let mut by_exp: BTreeMap<Experiment, Vec<ResultEntry>> = BTreeMap::new();
    for dir in run_dirs {
        let m = RunMetrics::read(dir).map_err(|e| CliError::input(e.to_string()))?;
        let mut entry = ResultEntry::new(&m.backend_id, &strategy_label(&m), m.task, m.report.weighted_f1 * 100.0);
        if let Some(c) = &m.classifier_id {
            entry = entry.with_sub(c);
        }
        by_exp.entry(m.experiment).or_default().push(entry);
    }
    let mut tables = Vec::new();
    for (experiment, entries) in by_exp {
        let table = aggregate(&entries).map_err(|e| CliError::input(e.to_string()))?;
        let sota_delta = sota_delta(&table, sota).map_err(|e| CliError::input(e.to_string()))?;
        let sota_gains = sota_gains(&table, sota).map_err(|e| CliError::input(e.to_string()))?;
        tables.push(ExperimentTable {
            experiment,
            table,
            sota_delta,
            sota_gains,
        });
    }
    let mut gains_over_prompting = BTreeMap::new();
    if let Some(base) = tables.iter().find(|t| t.experiment == Experiment::Exp1) {
        for t in tables.iter().filter(|t| t.experiment != Experiment::Exp1) {
            let gains = best_cell_gains(&t.table, &base.table).map_err(|e| CliError::input(e.to_string()))?;
            gains_over_prompting.insert(t.experiment, gains);
        }
    }
    let mut score_differences = Vec::new();
    if let Some(refs) = references {
        for dir in run_dirs {
            let preds = pipeline::read_predictions(dir).map_err(|e| CliError::input(e.to_string()))?;
            let store = ExplanationStore::open(&dir.join(EXPLANATIONS_FILE)).map_err(|e| CliError::input(e.to_string()))?;
            let reports = score_diff_analysis(&preds, &store, refs, &TfCosineScorer)
                .map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
            score_differences.push(RunScoreDiff {
                run_dir: dir.clone(),
                reports,
            });
        }
    }
    Ok(Report {
        tables,
        gains_over_prompting,
        score_differences,
    })
}

impl Report {
    pub fn render_text(&self, sota: &SotaTable) -> String {
        let mut text = String::new();
        for t in &self.tables {
            text.push_str(&format!("== {} ==\n", t.experiment));
            text.push_str(&t.table.render_text(Some(sota)));
            text.push_str("Relative gain of best cell over SOTA:\n");
            for g in &t.sota_gains {
                text.push_str(&format!("  {g}\n"));
            }
            text.push('\n');
        }
        for (exp, gains) in &self.gains_over_prompting {
            text.push_str(&format!("Relative gain of {exp} best cells over EXP1 best cells:\n"));
            for g in gains {
                text.push_str(&format!("  {g}\n"));
            }
        }
        for diff in &self.score_differences {
            text.push_str(&format!("Explanation score difference for {}:\n", diff.run_dir.display()));
            for r in &diff.reports {
                text.push_str(&format!("  {r}\n"));
            }
        }
        text
    }
}

pub fn cmd_report(args: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let sota = match &args.sota_file {
        Some(p) => SotaTable::from_file(p).map_err(|e| CliError::input(e.to_string()))?,
        None => SotaTable::bundled(),
    };
    let references = args
        .references
        .as_deref()
        .map(load_references)
        .transpose()
        .map_err(|e: analysis::AnalysisError| CliError::input(e.to_string()))?;
    let report = build_report(&args.run_dirs, &sota, references.as_ref())?;
    if let Some(path) = &args.json {
        let body = serde_json::to_string_pretty(&report).map_err(|e| CliError::input(e.to_string()))?;
        fs::write(path, body + "\n").map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    }
    write_out(out, &report.render_text(&sota))
}
