//! Acceptance gate. Prints one line per criterion and exits non-zero when
//! any criterion fails. Skipped criteria do not fail the gate.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use memescope::analysis::{relative_gain, score_diff_analysis, DiscrepancyKind, PublishedTable, PublishedTables};
use memescope::backends::{validate_finetune_config, FineTuneSettings, MockBackend, ReferenceClassifier};
use memescope::corpus::{self, ColumnMap, Corpus, Gold, TaskId, TaskSpec};
use memescope::metrics::{bleu, rouge, weighted_f1, MetricsError, RougeKind, SemanticScorer};
use memescope::pipeline::{
    generate_explanations, run_covexfil, run_experiment, snapshot_dir, Clock, CovexfilOptions, ExplanationKey,
    ExplanationRecord, ExplanationStore, Experiment, GenerationOptions, Prediction, PredictionRecord,
    PredictionSource, RunSpec, Runtime,
};
use memescope::prompting::{PromptStrategy, PromptTemplateSet, StrategyKind, DEFAULT_TEMPLATES};
use memescope::synthetic;
use memescope::text::round_half_away;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Environment variable naming the full Memotion label file.
const MEMOTION_ENV: &str = "MEMESCOPE_MEMOTION_CSV";

enum Outcome {
    Pass(String),
    Fail(String),
    Skipped(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{what}: got {got}, want {want} ± {tol}"))
}

// ---- 1 ---------------------------------------------------------------------

/// Weighted F1 from an explicit (K+1)×K confusion matrix, where the extra
/// predicted row collects unparsed outputs.
fn oracle_weighted_f1(preds: &[Option<usize>], golds: &[usize], k: usize) -> f64 {
    let mut m = vec![vec![0u64; k]; k + 1];
    for (p, &g) in preds.iter().zip(golds) {
        m[p.unwrap_or(k)][g] += 1;
    }
    let n = golds.len() as f64;
    let mut total = 0.0;
    for c in 0..k {
        let tp = m[c][c] as f64;
        let predicted: f64 = m[c].iter().map(|&v| v as f64).sum();
        let support: f64 = (0..=k).map(|r| m[r][c] as f64).sum();
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if support > 0.0 { tp / support } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        total += f * support / n;
    }
    total
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let k = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=200);
        let labels: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let golds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let preds: Vec<Option<usize>> = (0..n)
            .map(|_| (!rng.gen_bool(0.05)).then(|| rng.gen_range(0..k)))
            .collect();
        let p_str: Vec<Option<&str>> = preds.iter().map(|p| p.map(|i| labels[i].as_str())).collect();
        let g_str: Vec<&str> = golds.iter().map(|&g| labels[g].as_str()).collect();
        let got = weighted_f1(&p_str, &g_str, &labels).map_err(|e| format!("case {case}: {e}"))?;
        let want = oracle_weighted_f1(&preds, &golds, k);
        let delta = (got.weighted_f1 - want).abs();
        ensure(delta < 1e-12, || format!("case {case}: |Δ| = {delta:e}"))?;
        worst = worst.max(delta);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!("1000 cases, max |Δ| = {worst:e}, {secs:.2}s"))
}

// ---- 2 ---------------------------------------------------------------------

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn mismatch(published: f64, recomputed: f64) -> bool {
    (round_half_away(recomputed, 2) - published).abs() > 0.01 + 1e-9
}

/// Every printed summary entry that direct recomputation misses.
fn oracle_mismatches(t: &PublishedTable) -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    for row in &t.rows {
        if mismatch(row.avg, mean(&row.cells)) {
            out.insert(("row_avg".into(), format!("{}/{}", row.model, row.strategy)));
        }
    }
    for (i, col) in t.columns.iter().enumerate() {
        let values: Vec<f64> = t.rows.iter().map(|r| r.cells[i]).collect();
        if mismatch(t.column_avg[i], mean(&values)) {
            out.insert(("column_avg".into(), col.clone()));
        }
        if mismatch(t.column_std[i], sample_std(&values)) {
            out.insert(("column_std".into(), col.clone()));
        }
    }
    out
}

fn kind_name(kind: DiscrepancyKind) -> String {
    match kind {
        DiscrepancyKind::RowAvg => "row_avg",
        DiscrepancyKind::ColumnAvg => "column_avg",
        DiscrepancyKind::ColumnStd => "column_std",
    }
    .to_string()
}

fn criterion_2() -> Check {
    let tables = PublishedTables::bundled();
    let prompting = tables.get("prompting").ok_or("prompting table missing")?;
    let agg = prompting.aggregate().map_err(|e| e.to_string())?;
    let row_avg = |m: &str, s: &str| agg.row(m, s).map(|r| r.avg).ok_or(format!("row {m}/{s} missing"));
    close(row_avg("LV", "ZS")?, 25.03, 0.01, "LV/ZS avg")?;
    close(row_avg("QW", "FSC")?, 41.48, 0.01, "QW/FSC avg")?;
    let hm = agg.column_index(&"HM".parse().unwrap()).ok_or("HM column missing")?;
    close(agg.column_avg[hm].unwrap_or(f64::NAN), 27.09, 0.01, "HM mean")?;
    close(agg.column_std[hm].unwrap_or(f64::NAN), 2.56, 0.01, "HM sample std")?;

    let mut documented_total = 0;
    for name in ["prompting", "adapter_tuning", "explanation_classifiers"] {
        let t = tables.get(name).ok_or(format!("{name} table missing"))?;
        let found: BTreeSet<_> = t
            .check()
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|d| (kind_name(d.kind), d.key))
            .collect();
        let documented: BTreeSet<_> = t.discrepancies.iter().map(|d| (kind_name(d.kind), d.key.clone())).collect();
        let oracle = oracle_mismatches(t);
        ensure(found == oracle, || format!("{name}: check() {found:?} vs oracle {oracle:?}"))?;
        ensure(documented == oracle, || format!("{name}: ledger {documented:?} vs oracle {oracle:?}"))?;
        documented_total += documented.len();
    }
    ensure(tables.get("prompting").unwrap().discrepancies.is_empty(), || "prompting table should reconcile".into())?;
    Ok(format!("anchors reproduced; {documented_total} published mismatches all documented"))
}

// ---- 3 ---------------------------------------------------------------------

fn criterion_3() -> Check {
    for (new, base, want) in [(48.31, 38.30, 26.14), (57.95, 62.60, -7.43), (79.45, 77.65, 2.32)] {
        let got = relative_gain(new, base).map_err(|e| e.to_string())?;
        close(got, want, 0.05, &format!("relative_gain({new}, {base})"))?;
    }
    Ok("26.14, -7.43, 2.32".into())
}

// ---- 4 ---------------------------------------------------------------------

fn criterion_4() -> Check {
    let cfg = validate_finetune_config(&FineTuneSettings::default()).map_err(|e| e.to_string())?;
    ensure(cfg.rank == 16, || format!("rank {}", cfg.rank))?;
    ensure(cfg.alpha == 32.0, || format!("alpha {}", cfg.alpha))?;
    ensure(cfg.learning_rate == 2e-4, || format!("learning rate {}", cfg.learning_rate))?;
    ensure(cfg.epochs == 2, || format!("epochs {}", cfg.epochs))?;
    Ok(format!("rank {} alpha {} lr {:e} epochs {}", cfg.rank, cfg.alpha, cfg.learning_rate, cfg.epochs))
}

// ---- 5 ---------------------------------------------------------------------

fn run_dir_snapshot(spec: &RunSpec, corpus: &Corpus, concurrency: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut backend = MockBackend::new("mock").with_max_concurrency(8);
    let runtime = Runtime {
        concurrency,
        clock: Clock::Fixed(0),
        ..Runtime::default()
    };
    run_experiment(spec, corpus, &mut backend, &PromptTemplateSet::default_set(), dir.path(), &runtime, None)
        .map_err(|e| e.to_string())?;
    snapshot_dir(dir.path()).map_err(|e| e.to_string())
}

fn criterion_5() -> Check {
    let start = Instant::now();
    let corpus = synthetic::memotion(50, 5);
    let specs = [
        RunSpec::new(Experiment::Exp1, TaskId::SN, StrategyKind::FSC).with_seed(3),
        RunSpec::new(Experiment::Exp3, TaskId::HM, StrategyKind::ZSC).with_seed(3),
    ];
    for spec in &specs {
        let a = run_dir_snapshot(spec, &corpus, 1)?;
        let b = run_dir_snapshot(spec, &corpus, 1)?;
        let c = run_dir_snapshot(spec, &corpus, 8)?;
        ensure(a.len() >= 5, || format!("{:?}: only {:?}", spec.experiment, a.keys()))?;
        ensure(a == b, || format!("{:?}: two runs differ", spec.experiment))?;
        ensure(a == c, || format!("{:?}: concurrency 1 vs 8 differ", spec.experiment))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.2}s"))?;
    Ok(format!("EXP1 and EXP3 directories identical, {secs:.2}s"))
}

// ---- 6 ---------------------------------------------------------------------

/// Expected weighted F1 when predictions are drawn uniformly and
/// independently of the gold labels: class i has precision p_i and recall
/// 1/K.
fn uniform_chance_f1(golds: &[String], labels: &[String]) -> f64 {
    let n = golds.len() as f64;
    let k = labels.len() as f64;
    labels
        .iter()
        .map(|l| {
            let p = golds.iter().filter(|g| *g == l).count() as f64 / n;
            if p == 0.0 {
                0.0
            } else {
                p * 2.0 * p * (1.0 / k) / (p + 1.0 / k)
            }
        })
        .sum()
}

const SHUFFLES: u64 = 20;

fn criterion_6() -> Check {
    let task = TaskSpec::get(TaskId::SN);
    let corpus = synthetic::balanced(TaskId::SN, 300, 6);
    let backend = MockBackend::new("mock").with_scripted(synthetic::gold_answers(&corpus, TaskId::SN));
    let templates = PromptTemplateSet::default_set();
    let strategy = PromptStrategy::for_task(StrategyKind::ZSC, task);
    let opts = GenerationOptions {
        clock: Clock::Fixed(0),
        ..GenerationOptions::default()
    };
    let mut store = ExplanationStore::in_memory();
    generate_explanations(corpus.samples(), task, &backend, &strategy, &[], &templates, &mut store, &opts)
        .map_err(|e| e.to_string())?;
    let (train, test) = corpus::split(&corpus, 0.3, 6).map_err(|e| e.to_string())?;

    let covexfil = |train: &Corpus| {
        let mut clf = ReferenceClassifier::new();
        run_covexfil(train, &test, task, &store, "mock", StrategyKind::ZSC, &mut clf, 6, &CovexfilOptions::default())
            .map(|o| o.report.weighted_f1)
            .map_err(|e| e.to_string())
    };
    let separable = covexfil(&train)?;
    ensure(separable >= 0.95, || format!("separable F1 {separable:.4} < 0.95"))?;

    let test_golds: Vec<String> = test.samples().iter().map(|s| s.gold[&TaskId::SN].to_string()).collect();
    let chance = uniform_chance_f1(&test_golds, &task.labels);
    // One permutation of 210 training labels swings F1 by about ±0.1 on 90
    // test samples, so the expectation is estimated over several.
    let shuffled: Vec<f64> = (0..SHUFFLES)
        .map(|s| covexfil(&synthetic::shuffle_labels(&train, TaskId::SN, s)))
        .collect::<Result<_, _>>()?;
    let shuffled_mean = mean(&shuffled);
    ensure((shuffled_mean - chance).abs() <= 0.15, || {
        format!("shuffled mean F1 {shuffled_mean:.4} vs chance {chance:.4}")
    })?;
    Ok(format!(
        "separable {separable:.4}; shuffled mean {shuffled_mean:.4} over {SHUFFLES} permutations vs chance {chance:.4}"
    ))
}

// ---- 7 ---------------------------------------------------------------------

fn criterion_7() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let template_path = dir.path().join("templates.toml");
    std::fs::write(&template_path, DEFAULT_TEMPLATES).map_err(|e| e.to_string())?;
    let corpus = synthetic::memotion(20, 7);
    let task = TaskSpec::get(TaskId::OF);
    let strategy = PromptStrategy::for_task(StrategyKind::ZS, task);
    let backend = MockBackend::new("mock");
    let opts = GenerationOptions::default();
    let store_path = dir.path().join("explanations.jsonl");
    let mut store = ExplanationStore::open(&store_path).map_err(|e| e.to_string())?;

    let pass = |store: &mut ExplanationStore| {
        let templates = PromptTemplateSet::from_file(&template_path).map_err(|e| e.to_string())?;
        backend.reset_calls();
        let r = generate_explanations(corpus.samples(), task, &backend, &strategy, &[], &templates, store, &opts)
            .map_err(|e| e.to_string())?;
        Ok::<_, String>((backend.calls(), r.generated, r.cached))
    };
    let first = pass(&mut store)?;
    ensure(first == (20, 20, 0), || format!("first pass {first:?}"))?;
    let mut reopened = ExplanationStore::open(&store_path).map_err(|e| e.to_string())?;
    let rerun = pass(&mut reopened)?;
    ensure(rerun == (0, 0, 20), || format!("rerun {rerun:?}"))?;

    let edited = DEFAULT_TEMPLATES.replace("Text on the meme", "Caption on the meme");
    ensure(edited != DEFAULT_TEMPLATES, || "template edit had no effect".into())?;
    std::fs::write(&template_path, edited).map_err(|e| e.to_string())?;
    let after_edit = pass(&mut reopened)?;
    ensure(after_edit == (20, 20, 0), || format!("after edit {after_edit:?}"))?;
    Ok("rerun made 0 calls; template edit regenerated 20/20".into())
}

// ---- 8 ---------------------------------------------------------------------

fn criterion_8() -> Check {
    let r1 = rouge("the cat sat", "the cat", RougeKind::N(1)).map_err(|e| e.to_string())?;
    close(r1.recall, 1.0, 1e-4, "ROUGE-1 R")?;
    close(r1.precision, 0.6667, 1e-4, "ROUGE-1 P")?;
    close(r1.f1, 0.8, 1e-4, "ROUGE-1 F")?;
    let rl = rouge("a b c d", "a c d", RougeKind::L).map_err(|e| e.to_string())?;
    close(rl.f1, 0.8571, 1e-4, "ROUGE-L F")?;
    let corpus = ["the cat is on the mat", "there is a cat on the mat"];
    let same = bleu(&corpus, &corpus, 4).map_err(|e| e.to_string())?;
    close(same.score, 1.0, 1e-4, "BLEU identical")?;
    let clipped = bleu(&["the the the the the the the"], &["the cat is on the mat"], 4).map_err(|e| e.to_string())?;
    close(clipped.precisions[0], 2.0 / 7.0, 1e-4, "clipped unigram precision")?;
    close(clipped.score, 0.0, 1e-4, "BLEU clipped repetition")?;
    Ok("ROUGE-1, ROUGE-L, BLEU anchors".into())
}

// ---- 9 ---------------------------------------------------------------------

/// Scores each explanation by table lookup; the reference is ignored.
struct Lookup(BTreeMap<String, f64>);

impl SemanticScorer for Lookup {
    fn scorer_id(&self) -> &str {
        "lookup"
    }
    fn score(&self, candidate: &str, _reference: &str) -> Result<f64, MetricsError> {
        self.0.get(candidate).copied().ok_or(MetricsError::EmptyText)
    }
}

fn score_fixture(outcomes: &[(bool, f64)]) -> (Vec<PredictionRecord>, ExplanationStore, BTreeMap<String, String>, Lookup) {
    let mut preds = Vec::new();
    let mut records = Vec::new();
    let mut refs = BTreeMap::new();
    let mut scores = BTreeMap::new();
    for (i, &(correct, score)) in outcomes.iter().enumerate() {
        let id = format!("m{i}");
        let explanation = format!("explanation {i}");
        records.push(ExplanationRecord {
            sample_id: id.clone(),
            backend_id: "mock".into(),
            strategy: StrategyKind::ZSC,
            prompt_hash: "p".into(),
            explanation: explanation.clone(),
            created_at: 0,
        });
        scores.insert(explanation, score);
        refs.insert(id.clone(), format!("silver {i}"));
        preds.push(PredictionRecord {
            sample_id: id.clone(),
            task_id: TaskId::MG,
            predicted: Prediction::Label(if correct { "misogynous" } else { "non_misogynous" }.into()),
            gold: Gold::Single("misogynous".into()),
            source: PredictionSource::Prompted,
            raw_output_ref: Some(ExplanationKey {
                sample_id: id,
                backend_id: "mock".into(),
                strategy: StrategyKind::ZSC,
                prompt_hash: "p".into(),
            }),
            failure: None,
        });
    }
    (preds, ExplanationStore::from_records(records), refs, Lookup(scores))
}

fn criterion_9() -> Check {
    // correct mean 0.90, incorrect mean 0.20
    let (preds, store, refs, scorer) = score_fixture(&[(true, 0.95), (true, 0.85), (false, 0.30), (false, 0.10)]);
    let report = score_diff_analysis(&preds, &store, &refs, &scorer).map_err(|e| e.to_string())?;
    let r = report.first().ok_or("no report")?;
    let d = r.difference.ok_or("difference missing")?;
    close(d, 0.70, 1e-9, "difference")?;

    let (preds, store, refs, scorer) = score_fixture(&[(true, 0.9), (true, 0.8)]);
    let report = score_diff_analysis(&preds, &store, &refs, &scorer).map_err(|e| e.to_string())?;
    let r = report.first().ok_or("no report")?;
    ensure(r.difference.is_none() && r.mean_score_incorrect.is_none(), || format!("fabricated value {r:?}"))?;
    ensure(r.flag.is_some(), || "all-correct case not flagged".into())?;
    Ok(format!("difference {d:.2}; all-correct flagged"))
}

// ---- 10 --------------------------------------------------------------------

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn round_trip(c: &Corpus) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("c.jsonl");
    c.write_jsonl(&path).map_err(|e| e.to_string())?;
    let back = Corpus::read_jsonl(&path).map_err(|e| e.to_string())?;
    ensure(&back == c, || "JSONL round trip changed the corpus".into())
}

fn criterion_10() -> Outcome {
    let fixtures = || -> Check {
        let memotion = corpus::load(&fixture("memotion_sample.csv"), &ColumnMap::memotion_default())
            .map_err(|e| e.to_string())?;
        let mami = corpus::load(&fixture("mami_sample.tsv"), &ColumnMap::mami_default()).map_err(|e| e.to_string())?;
        ensure(memotion.len() == 7 && mami.len() == 5, || "fixture sizes".into())?;
        round_trip(&memotion)?;
        round_trip(&mami)?;
        round_trip(&synthetic::mami(30, 10))?;
        Ok("fixtures round-trip".into())
    };
    let base = match fixtures() {
        Ok(msg) => msg,
        Err(e) => return Outcome::Fail(e),
    };
    let Some(path) = std::env::var_os(MEMOTION_ENV) else {
        return Outcome::Skipped(format!("{base}; full-dataset stats skipped ({MEMOTION_ENV} unset)"));
    };
    let full = || -> Check {
        let c = corpus::load(Path::new(&path), &ColumnMap::memotion_default()).map_err(|e| e.to_string())?;
        let stats = corpus::compute_stats(&c, TaskId::SN).map_err(|e| e.to_string())?;
        let pos = stats.get("positive").ok_or("no positive label")?;
        ensure(pos.count == 4160, || format!("SN/positive count {}", pos.count))?;
        close(round_half_away(pos.avg_caption_words, 2), 13.27, 1e-9, "SN/positive avg words")?;
        Ok(format!("{base}; SN/positive 4160, 13.27"))
    };
    match full() {
        Ok(msg) => Outcome::Pass(msg),
        Err(e) => Outcome::Fail(e),
    }
}

fn main() {
    let checks: Vec<(usize, Box<dyn Fn() -> Outcome>)> = vec![
        (1, Box::new(|| criterion_1().into())),
        (2, Box::new(|| criterion_2().into())),
        (3, Box::new(|| criterion_3().into())),
        (4, Box::new(|| criterion_4().into())),
        (5, Box::new(|| criterion_5().into())),
        (6, Box::new(|| criterion_6().into())),
        (7, Box::new(|| criterion_7().into())),
        (8, Box::new(|| criterion_8().into())),
        (9, Box::new(|| criterion_9().into())),
        (10, Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (n, check) in checks {
        match check() {
            Outcome::Pass(msg) => println!("criterion {n}: PASS {msg}"),
            Outcome::Skipped(msg) => println!("criterion {n}: SKIPPED {msg}"),
            Outcome::Fail(msg) => {
                failed += 1;
                println!("criterion {n}: FAIL {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

impl From<Check> for Outcome {
    fn from(r: Check) -> Self {
        match r {
            Ok(msg) => Outcome::Pass(msg),
            Err(msg) => Outcome::Fail(msg),
        }
    }
}
