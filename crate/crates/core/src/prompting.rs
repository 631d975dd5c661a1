//! Prompt construction for the four prompting strategies, few-shot exemplar
//! selection, and recovery of task labels from free-form model output.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_label, Corpus, Gold, MemeSample, TaskId, TaskSpec};
use crate::text;

pub const DEFAULT_ANSWER_MARKER: &str = "Answer:";

/// Shipped template file.
pub const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.toml");

/// Three-step reasoning used by ZSC and FSC unless overridden.
pub const DEFAULT_COT_STEPS: [&str; 3] = [
    "Describe the visual scene: the people, objects, and setting in the image.",
    "Interpret how the embedded text and the image play off each other, including irony or hidden meaning.",
    "Decide which label fits best and state it after the answer marker.",
];

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("no template for task {task} and strategy {kind}")]
    TemplateMissing { task: TaskId, kind: StrategyKind },
    #[error("strategy expects {expected} exemplars, got {got}")]
    ExemplarCountMismatch { expected: usize, got: usize },
    #[error("invalid template for {kind}: {reason}")]
    InvalidTemplate { kind: StrategyKind, reason: String },
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("cannot select exemplars from an empty training set")]
    EmptyTrainSet,
    #[error("exemplar label `{0}` is not in the task vocabulary")]
    UnknownExemplarLabel(String),
    #[error("template file: {0}")]
    TemplateFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    ZS,
    ZSC,
    FS,
    FSC,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::ZS,
        StrategyKind::ZSC,
        StrategyKind::FS,
        StrategyKind::FSC,
    ];

    pub fn is_few_shot(self) -> bool {
        matches!(self, StrategyKind::FS | StrategyKind::FSC)
    }

    pub fn is_chain_of_thought(self) -> bool {
        matches!(self, StrategyKind::ZSC | StrategyKind::FSC)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::ZS => "ZS",
            StrategyKind::ZSC => "ZSC",
            StrategyKind::FS => "FS",
            StrategyKind::FSC => "FSC",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown strategy `{s}` (expected zs, zsc, fs or fsc)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStrategy {
    pub kind: StrategyKind,
    pub shot_count: usize,
    pub cot_steps: Vec<String>,
}

impl PromptStrategy {
    /// Strategy with default shots (one per label, at most four) and the
    /// default three reasoning steps where applicable.
    pub fn for_task(kind: StrategyKind, task: &TaskSpec) -> Self {
        let shots = if kind.is_few_shot() {
            task.labels.len().min(4)
        } else {
            0
        };
        Self::new(kind, shots).expect("default strategy is valid")
    }

    pub fn new(kind: StrategyKind, shot_count: usize) -> Result<Self, PromptError> {
        let cot_steps = if kind.is_chain_of_thought() {
            DEFAULT_COT_STEPS.iter().map(|s| s.to_string()).collect()
        } else {
            Vec::new()
        };
        Self::with_steps(kind, shot_count, cot_steps)
    }

    pub fn with_steps(
        kind: StrategyKind,
        shot_count: usize,
        cot_steps: Vec<String>,
    ) -> Result<Self, PromptError> {
        if kind.is_few_shot() && shot_count == 0 {
            return Err(PromptError::InvalidStrategy(format!("{kind} needs at least one shot")));
        }
        if !kind.is_few_shot() && shot_count != 0 {
            return Err(PromptError::InvalidStrategy(format!("{kind} takes no shots")));
        }
        if kind.is_chain_of_thought() == cot_steps.is_empty() {
            return Err(PromptError::InvalidStrategy(format!(
                "{kind} {} reasoning steps",
                if cot_steps.is_empty() { "requires" } else { "takes no" }
            )));
        }
        Ok(Self {
            kind,
            shot_count,
            cot_steps,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    #[allow(dead_code)]
    version: Option<u32>,
    answer_marker: Option<String>,
    strategies: BTreeMap<StrategyKind, String>,
    #[serde(default)]
    tasks: BTreeMap<TaskId, BTreeMap<StrategyKind, String>>,
}

/// Templates resolved per (task, strategy kind).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptTemplateSet {
    pub answer_marker: String,
    templates: BTreeMap<TaskId, BTreeMap<StrategyKind, String>>,
}

impl PromptTemplateSet {
    pub fn default_set() -> Self {
        Self::from_toml_str(DEFAULT_TEMPLATES).expect("shipped templates are valid")
    }

    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::TemplateFile(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PromptError> {
        let file: TemplateFile =
            toml::from_str(text).map_err(|e| PromptError::TemplateFile(e.to_string()))?;
        let mut templates = BTreeMap::new();
        for task in TaskId::ALL {
            let mut per_task = BTreeMap::new();
            for kind in StrategyKind::ALL {
                let body = file
                    .tasks
                    .get(&task)
                    .and_then(|m| m.get(&kind))
                    .or_else(|| file.strategies.get(&kind));
                if let Some(body) = body {
                    validate_template(kind, body)?;
                    per_task.insert(kind, body.trim().to_string());
                }
            }
            templates.insert(task, per_task);
        }
        Ok(Self {
            answer_marker: file
                .answer_marker
                .unwrap_or_else(|| DEFAULT_ANSWER_MARKER.to_string()),
            templates,
        })
    }

    pub fn get(&self, task: TaskId, kind: StrategyKind) -> Option<&str> {
        self.templates.get(&task)?.get(&kind).map(String::as_str)
    }

    /// Replace (or add) the template for one (task, kind).
    pub fn set(&mut self, task: TaskId, kind: StrategyKind, body: &str) -> Result<(), PromptError> {
        validate_template(kind, body)?;
        self.templates
            .entry(task)
            .or_default()
            .insert(kind, body.trim().to_string());
        Ok(())
    }

    pub fn remove(&mut self, task: TaskId, kind: StrategyKind) {
        if let Some(m) = self.templates.get_mut(&task) {
            m.remove(&kind);
        }
    }

    /// Content hash over the marker and every resolved template.
    pub fn content_hash(&self) -> String {
        text::sha256_hex(&serde_json::to_string(self).expect("templates serialize"))
    }
}

fn validate_template(kind: StrategyKind, body: &str) -> Result<(), PromptError> {
    let mut required = vec!["{labels}", "{answer_marker}"];
    if kind.is_few_shot() {
        required.push("{exemplars}");
    }
    if kind.is_chain_of_thought() {
        required.push("{cot_steps}");
    }
    match required.into_iter().find(|p| !body.contains(p)) {
        Some(missing) => Err(PromptError::InvalidTemplate {
            kind,
            reason: format!("missing placeholder {missing}"),
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    /// Source sample, when drawn from a corpus.
    pub sample_id: Option<String>,
    pub caption: String,
    pub gold_label: String,
    pub rationale: Option<String>,
}

/// Single-pass `{name}` substitution; substituted text is never rescanned.
fn render(template: &str, values: &BTreeMap<&str, String>) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if values.contains_key(&after[..close]) => {
                out.push_str(&values[&after[..close]]);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn caption_text(caption: &str) -> String {
    if caption.trim().is_empty() {
        "(no embedded text)".to_string()
    } else {
        caption.trim().replace('\n', " ")
    }
}

/// Render the prompt for one sample. The output lists every label once,
/// and its final line is the answer marker.
pub fn build_prompt(
    task: &TaskSpec,
    strategy: &PromptStrategy,
    sample: &MemeSample,
    exemplars: &[Exemplar],
    templates: &PromptTemplateSet,
) -> Result<String, PromptError> {
    let template =
        templates
            .get(task.task_id, strategy.kind)
            .ok_or(PromptError::TemplateMissing {
                task: task.task_id,
                kind: strategy.kind,
            })?;
    if exemplars.len() != strategy.shot_count {
        return Err(PromptError::ExemplarCountMismatch {
            expected: strategy.shot_count,
            got: exemplars.len(),
        });
    }
    if let Some(bad) = exemplars.iter().find(|e| !task.contains(&e.gold_label)) {
        return Err(PromptError::UnknownExemplarLabel(bad.gold_label.clone()));
    }
    let marker = &templates.answer_marker;
    let labels = task
        .labels
        .iter()
        .map(|l| format!("- {l}"))
        .collect::<Vec<_>>()
        .join("\n");
    let cot = strategy
        .cot_steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let shots = exemplars
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut block = format!("Example {}\nText on the meme: \"{}\"\n", i + 1, caption_text(&e.caption));
            if let Some(r) = &e.rationale {
                block.push_str(&format!("Reasoning: {r}\n"));
            }
            block.push_str(&format!("{marker} {}", e.gold_label));
            block
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    let values = BTreeMap::from([
        ("task", task.task_id.description().to_string()),
        ("labels", labels),
        ("caption", caption_text(&sample.caption)),
        ("exemplars", shots),
        ("cot_steps", cot),
        ("answer_marker", marker.clone()),
    ]);
    let mut prompt = render(template, &values).trim_end().to_string();
    let last_line = prompt.lines().last().unwrap_or("");
    if last_line.trim() != marker.trim() {
        prompt.push('\n');
        prompt.push_str(marker);
    }
    Ok(prompt)
}

/// Stratified round-robin selection: labels are visited in vocabulary order,
/// each contributing its next (seed-shuffled) sample, until `k` exemplars
/// are chosen or every label is exhausted. Labels without samples are
/// skipped.
pub fn select_exemplars(
    train: &Corpus,
    task: &TaskSpec,
    k: usize,
    seed: u64,
) -> Result<Vec<Exemplar>, PromptError> {
    if train.is_empty() {
        return Err(PromptError::EmptyTrainSet);
    }
    if k == 0 {
        return Err(PromptError::InvalidStrategy("exemplar count must be at least 1".into()));
    }
    let mut pools: Vec<Vec<&MemeSample>> = vec![Vec::new(); task.labels.len()];
    for sample in train.samples() {
        let labels: Vec<&str> = match sample.gold_for(task.task_id) {
            Some(Gold::Single(l)) => vec![l.as_str()],
            Some(Gold::Multi(set)) => set.iter().map(String::as_str).collect(),
            None => continue,
        };
        for label in labels {
            if let Some(i) = task.label_index(label) {
                pools[i].push(sample);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let mut cursors = vec![0usize; pools.len()];
    let mut used = HashSet::new();
    let mut chosen = Vec::with_capacity(k);
    while chosen.len() < k {
        let mut progressed = false;
        for (i, pool) in pools.iter().enumerate() {
            if chosen.len() == k {
                break;
            }
            while let Some(sample) = pool.get(cursors[i]) {
                cursors[i] += 1;
                if used.insert(sample.sample_id.as_str()) {
                    chosen.push(Exemplar {
                        sample_id: Some(sample.sample_id.clone()),
                        caption: sample.caption.clone(),
                        gold_label: task.labels[i].clone(),
                        rationale: None,
                    });
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    if chosen.len() < k {
        log::warn!(
            "only {} exemplar(s) available for {} (requested {k})",
            chosen.len(),
            task.task_id
        );
    }
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    MarkerExact,
    LongestMatch,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLabel {
    /// `None` is the UNPARSED outcome.
    pub label: Option<String>,
    pub match_rule: MatchRule,
    pub raw_excerpt: String,
}

impl ParsedLabel {
    pub fn is_unparsed(&self) -> bool {
        self.label.is_none()
    }
}

const SUFFIXES: [&str; 15] = [
    "ications", "ication", "ations", "ation", "ously", "ous", "ies", "ied", "ing", "ed", "es",
    "ly", "s", "e", "y",
];

/// Crude suffix stripping so that e.g. "objectifies" and "objectification"
/// share a stem. Stems never drop below three characters.
fn stem(word: &str) -> String {
    let mut w = word.to_lowercase();
    for _ in 0..2 {
        let Some(suffix) = SUFFIXES
            .iter()
            .find(|s| w.ends_with(*s) && w.len() - s.len() >= 3)
        else {
            break;
        };
        w.truncate(w.len() - suffix.len());
    }
    w
}

fn words(text: &str) -> Vec<&str> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct LabelMatch {
    label: usize,
    start: usize,
    end: usize,
}

/// Word-aligned stem matches of every vocabulary label in `text`, with
/// matches nested inside a longer match removed ("funny" inside "very
/// funny").
fn label_matches(text: &str, task: &TaskSpec) -> (Vec<LabelMatch>, Vec<String>) {
    let original: Vec<String> = words(text).into_iter().map(str::to_string).collect();
    let stems: Vec<String> = original.iter().map(|w| stem(w)).collect();
    let mut found = Vec::new();
    for (li, label) in task.labels.iter().enumerate() {
        let pattern: Vec<String> = normalize_label(label).split('_').map(stem).collect();
        if pattern.is_empty() || pattern.len() > stems.len() {
            continue;
        }
        for start in 0..=stems.len() - pattern.len() {
            if stems[start..start + pattern.len()] == pattern[..] {
                found.push(LabelMatch {
                    label: li,
                    start,
                    end: start + pattern.len(),
                });
            }
        }
    }
    let kept = found
        .iter()
        .filter(|m| {
            !found.iter().any(|o| {
                o.start <= m.start && m.end <= o.end && (o.end - o.start) > (m.end - m.start)
            })
        })
        .copied()
        .collect();
    (kept, original)
}

fn marker_lines<'a>(raw: &'a str, marker: &str) -> Vec<&'a str> {
    let marker = marker.trim().to_lowercase();
    raw.lines()
        .filter_map(|line| {
            let trimmed = line.trim_start().trim_start_matches(['*', '#', '>']).trim_start();
            let lower = trimmed.to_lowercase();
            lower
                .starts_with(&marker)
                .then(|| trimmed.get(marker.len()..).unwrap_or(""))
        })
        .collect()
}

/// Recover one task label from free-form output.
///
/// 1. A line starting with the answer marker naming exactly one label wins
///    (the last such line if several).
/// 2. Otherwise the longest label mentioned anywhere, earliest on ties.
/// 3. Otherwise UNPARSED.
pub fn parse_label(raw: &str, task: &TaskSpec, answer_marker: &str) -> ParsedLabel {
    for line in marker_lines(raw, answer_marker).into_iter().rev() {
        let (matches, _) = label_matches(line, task);
        let distinct: HashSet<usize> = matches.iter().map(|m| m.label).collect();
        if distinct.len() == 1 {
            return ParsedLabel {
                label: Some(task.labels[matches[0].label].clone()),
                match_rule: MatchRule::MarkerExact,
                raw_excerpt: format!("{} {}", answer_marker.trim(), line.trim()),
            };
        }
    }
    let (matches, original) = label_matches(raw, task);
    let best = matches.iter().min_by(|a, b| {
        let la = task.labels[a.label].len();
        let lb = task.labels[b.label].len();
        lb.cmp(&la).then(a.start.cmp(&b.start))
    });
    match best {
        Some(m) => ParsedLabel {
            label: Some(task.labels[m.label].clone()),
            match_rule: MatchRule::LongestMatch,
            raw_excerpt: original[m.start..m.end].join(" "),
        },
        None => ParsedLabel {
            label: None,
            match_rule: MatchRule::None,
            raw_excerpt: raw.chars().take(80).collect(),
        },
    }
}

/// Recover a label set. The last answer-marker line is authoritative when
/// present (so "Answer: none" yields the empty set); otherwise every label
/// mentioned in the text is collected.
pub fn parse_multilabel(raw: &str, task: &TaskSpec, answer_marker: &str) -> std::collections::BTreeSet<String> {
    let scope = marker_lines(raw, answer_marker).last().copied().unwrap_or(raw);
    let (matches, _) = label_matches(scope, task);
    matches
        .into_iter()
        .map(|m| task.labels[m.label].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Dataset;
    use std::collections::BTreeSet;

    fn sample(caption: &str) -> MemeSample {
        MemeSample {
            sample_id: "s1".into(),
            image_ref: "s1.jpg".into(),
            caption: caption.into(),
            gold: BTreeMap::new(),
        }
    }

    fn exemplar(caption: &str, label: &str) -> Exemplar {
        Exemplar {
            sample_id: None,
            caption: caption.into(),
            gold_label: label.into(),
            rationale: None,
        }
    }

    #[test]
    fn zs_prompt_lists_labels_without_examples() {
        let task = TaskSpec::get(TaskId::SN);
        let p = build_prompt(
            task,
            &PromptStrategy::for_task(StrategyKind::ZS, task),
            &sample("hello"),
            &[],
            &PromptTemplateSet::default_set(),
        )
        .unwrap();
        for l in ["positive", "neutral", "negative"] {
            assert!(p.contains(&format!("- {l}")));
        }
        assert!(!p.contains("Example 1"));
        assert_eq!(p.lines().last(), Some("Answer:"));
    }

    #[test]
    fn fs_prompt_keeps_exemplar_order() {
        let task = TaskSpec::get(TaskId::SN);
        let strategy = PromptStrategy::new(StrategyKind::FS, 2).unwrap();
        let shots = [exemplar("first caption", "positive"), exemplar("second caption", "negative")];
        let p = build_prompt(task, &strategy, &sample("x"), &shots, &PromptTemplateSet::default_set()).unwrap();
        let a = p.find("first caption").unwrap();
        let b = p.find("second caption").unwrap();
        assert!(a < b);
    }

    #[test]
    fn fsc_prompt_orders_steps_exemplars_marker() {
        let task = TaskSpec::get(TaskId::OF);
        let strategy = PromptStrategy::for_task(StrategyKind::FSC, task);
        assert_eq!(strategy.shot_count, 4);
        let shots: Vec<_> = task.labels.iter().map(|l| exemplar("ex", l)).collect();
        let p = build_prompt(task, &strategy, &sample("x"), &shots, &PromptTemplateSet::default_set()).unwrap();
        let step_pos: Vec<usize> = ["\n1. ", "\n2. ", "\n3. "].iter().map(|s| p.find(s).unwrap()).collect();
        assert!(step_pos.windows(2).all(|w| w[0] < w[1]));
        assert!(!p.contains("\n4. "));
        let first_example = p.find("Example 1").unwrap();
        assert!(step_pos[2] < first_example);
        assert!(p.ends_with("\nAnswer:"));
    }

    #[test]
    fn build_prompt_errors() {
        let task = TaskSpec::get(TaskId::SN);
        let mut templates = PromptTemplateSet::default_set();
        let fs = PromptStrategy::new(StrategyKind::FS, 2).unwrap();
        assert_eq!(
            build_prompt(task, &fs, &sample("x"), &[], &templates).unwrap_err(),
            PromptError::ExemplarCountMismatch { expected: 2, got: 0 }
        );
        templates.remove(TaskId::SN, StrategyKind::ZS);
        let zs = PromptStrategy::new(StrategyKind::ZS, 0).unwrap();
        assert!(matches!(
            build_prompt(task, &zs, &sample("x"), &[], &templates),
            Err(PromptError::TemplateMissing { .. })
        ));
    }

    #[test]
    fn caption_with_braces_is_not_rescanned() {
        let task = TaskSpec::get(TaskId::SN);
        let p = build_prompt(
            task,
            &PromptStrategy::new(StrategyKind::ZS, 0).unwrap(),
            &sample("look {labels} here"),
            &[],
            &PromptTemplateSet::default_set(),
        )
        .unwrap();
        assert!(p.contains("look {labels} here"));
    }

    #[test]
    fn templates_require_placeholders() {
        let err = PromptTemplateSet::from_toml_str(
            "[strategies]\nZS = \"{labels} only\"\n",
        )
        .unwrap_err();
        assert!(matches!(err, PromptError::InvalidTemplate { .. }));
        let err = PromptTemplateSet::from_toml_str("[strategies]\nFS = \"{labels} {answer_marker}\"\n").unwrap_err();
        assert!(matches!(err, PromptError::InvalidTemplate { kind: StrategyKind::FS, .. }));
    }

    #[test]
    fn strategy_invariants() {
        assert!(PromptStrategy::new(StrategyKind::FS, 0).is_err());
        assert!(PromptStrategy::new(StrategyKind::ZS, 1).is_err());
        assert_eq!(PromptStrategy::new(StrategyKind::ZSC, 0).unwrap().cot_steps.len(), 3);
        assert!(PromptStrategy::with_steps(StrategyKind::ZS, 0, vec!["x".into()]).is_err());
    }

    fn corpus_mv(n_not: usize, n_mot: usize) -> Corpus {
        let mut samples = Vec::new();
        for (label, n) in [("not_motivational", n_not), ("motivational", n_mot)] {
            for i in 0..n {
                samples.push(MemeSample {
                    sample_id: format!("{label}-{i}"),
                    image_ref: "x.jpg".into(),
                    caption: format!("{label} caption {i}"),
                    gold: BTreeMap::from([(TaskId::MV, Gold::Single(label.into()))]),
                });
            }
        }
        Corpus::new(Dataset::Memotion, vec![TaskId::MV], samples).unwrap()
    }

    #[test]
    fn round_robin_over_two_labels() {
        let task = TaskSpec::get(TaskId::MV);
        let picks = select_exemplars(&corpus_mv(3, 3), task, 3, 5).unwrap();
        let labels: Vec<_> = picks.iter().map(|e| e.gold_label.as_str()).collect();
        assert_eq!(labels, ["not_motivational", "motivational", "not_motivational"]);
        assert_eq!(select_exemplars(&corpus_mv(3, 3), task, 3, 5).unwrap(), picks);
    }

    #[test]
    fn single_pick_comes_from_first_nonempty_label() {
        let task = TaskSpec::get(TaskId::MV);
        let picks = select_exemplars(&corpus_mv(0, 2), task, 1, 0).unwrap();
        assert_eq!(picks[0].gold_label, "motivational");
        let empty = Corpus::new(Dataset::Memotion, vec![TaskId::MV], vec![]).unwrap();
        assert_eq!(select_exemplars(&empty, task, 1, 0).unwrap_err(), PromptError::EmptyTrainSet);
    }

    #[test]
    fn parse_marker_exact() {
        let task = TaskSpec::get(TaskId::HM);
        let p = parse_label("Answer: very_funny", task, "Answer:");
        assert_eq!(p.label.as_deref(), Some("very_funny"));
        assert_eq!(p.match_rule, MatchRule::MarkerExact);
    }

    #[test]
    fn parse_longest_match() {
        let task = TaskSpec::get(TaskId::HM);
        let p = parse_label("this meme is very funny indeed", task, "Answer:");
        assert_eq!(p.label.as_deref(), Some("very_funny"));
        assert_eq!(p.match_rule, MatchRule::LongestMatch);
        assert_eq!(p.raw_excerpt, "very funny");
        let p = parse_label("honestly not funny at all", task, "Answer:");
        assert_eq!(p.label.as_deref(), Some("not_funny"));
    }

    #[test]
    fn parse_unparsed() {
        let task = TaskSpec::get(TaskId::HM);
        let p = parse_label("cannot decide", task, "Answer:");
        assert!(p.is_unparsed());
        assert_eq!(p.match_rule, MatchRule::None);
        assert!(parse_label("", task, "Answer:").is_unparsed());
    }

    #[test]
    fn parse_prefers_last_marker_line() {
        let task = TaskSpec::get(TaskId::SN);
        let raw = "The meme looks positive at first.\nANSWER: negative";
        assert_eq!(parse_label(raw, task, "Answer:").label.as_deref(), Some("negative"));
    }

    #[test]
    fn multilabel_parsing() {
        let task = TaskSpec::get(TaskId::MGT);
        let set = |ls: &[&str]| ls.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(parse_multilabel("Answer: shaming, violence", task, "Answer:"), set(&["shaming", "violence"]));
        assert_eq!(parse_multilabel("objectifies women as objects", task, "Answer:"), set(&["objectification"]));
        assert!(parse_multilabel("", task, "Answer:").is_empty());
        assert!(parse_multilabel("violence is shown\nAnswer: none", task, "Answer:").is_empty());
    }
}
