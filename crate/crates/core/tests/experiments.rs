use std::collections::{BTreeMap, BTreeSet};

use memescope::backends::{BackendError, FineTuneSettings, MockBackend, ReferenceClassifier};
use memescope::corpus::{Corpus, Dataset, Gold, MemeSample, TaskId, TaskSpec};
use memescope::metrics::weighted_f1;
use memescope::pipeline::{
    generate_explanations, run_covexfil, run_exp1, run_exp2, run_experiment, Clock, CovexfilOptions,
    ExplanationStore, Experiment, GenerationOptions, MultiLabelMode, PipelineError, Prediction, RunManifest,
    RunSpec, Runtime, LOG_FILE, MANIFEST_FILE, PREDICTIONS_FILE,
};
use memescope::prompting::{PromptStrategy, PromptTemplateSet, StrategyKind};
use memescope::synthetic;

fn mv_corpus(rows: &[(&str, &str, &str)]) -> Corpus {
    let samples = rows
        .iter()
        .map(|&(id, caption, label)| MemeSample {
            sample_id: id.into(),
            image_ref: format!("{id}.jpg"),
            caption: caption.into(),
            gold: BTreeMap::from([(TaskId::MV, Gold::Single(label.into()))]),
        })
        .collect();
    Corpus::new(Dataset::Memotion, vec![TaskId::MV], samples).unwrap()
}

fn opts() -> GenerationOptions {
    GenerationOptions {
        clock: Clock::Fixed(0),
        ..GenerationOptions::default()
    }
}

#[test]
fn exp2_memorized_captions_match_the_oracle() {
    let train = mv_corpus(&[
        ("t1", "never give up on the climb", "motivational"),
        ("t2", "cat sits on the keyboard again", "not_motivational"),
        ("t3", "you can do it champ", "motivational"),
        ("t4", "monday traffic jam", "not_motivational"),
    ]);
    let test = mv_corpus(&[
        ("e1", "never give up on the climb", "motivational"),
        ("e2", "cat sits on the keyboard again", "motivational"),
        ("e3", "pizza for breakfast", "not_motivational"),
        ("e4", "rainy weekend plans", "motivational"),
        ("e5", "monday traffic jam", "not_motivational"),
    ]);
    let task = TaskSpec::get(TaskId::MV);
    let mut backend = MockBackend::trainable("vlm");
    let mut store = ExplanationStore::in_memory();
    let (cfg, outcome) = run_exp2(
        &train,
        &test,
        task,
        &mut backend,
        &FineTuneSettings::default(),
        &PromptTemplateSet::default_set(),
        &mut store,
        &opts(),
        MultiLabelMode::default(),
    )
    .unwrap();
    assert_eq!(backend.tuned_with(), Some(cfg));

    // a collision answers with the memorized train label, anything else is unparsed
    let memorized: BTreeMap<&str, &str> =
        train.samples().iter().map(|s| (s.caption.as_str(), s.gold[&TaskId::MV].as_single().unwrap())).collect();
    let expected: Vec<Option<&str>> = test.samples().iter().map(|s| memorized.get(s.caption.as_str()).copied()).collect();
    let golds: Vec<&str> = test.samples().iter().map(|s| s.gold[&TaskId::MV].as_single().unwrap()).collect();
    let oracle = weighted_f1(&expected, &golds, &task.labels).unwrap();
    assert!((outcome.report.weighted_f1 - oracle.weighted_f1).abs() < 1e-12);
    assert_eq!(outcome.report.unparsed, 2);

    let e1 = outcome.predictions.iter().find(|p| p.sample_id == "e1").unwrap();
    assert_eq!(e1.predicted, Prediction::Label("motivational".into()));
    let key = e1.raw_output_ref.as_ref().unwrap();
    assert!(key.backend_id.starts_with("vlm+adapter-"));
    assert!(store.get(key).is_some());
}

#[test]
fn exp2_rejects_before_training() {
    let train = mv_corpus(&[("t1", "a", "motivational"), ("t2", "b", "not_motivational")]);
    let test = mv_corpus(&[("e1", "a", "motivational")]);
    let task = TaskSpec::get(TaskId::MV);
    let templates = PromptTemplateSet::default_set();
    let mut store = ExplanationStore::in_memory();

    let mut backend = MockBackend::trainable("vlm");
    let bad = FineTuneSettings {
        learning_rate: Some(-1.0),
        ..FineTuneSettings::default()
    };
    let err = run_exp2(&train, &test, task, &mut backend, &bad, &templates, &mut store, &opts(), MultiLabelMode::default())
        .unwrap_err();
    assert!(matches!(err, PipelineError::Backend(BackendError::InvalidHyperparameter { .. })), "{err}");
    assert_eq!(backend.tuned_with(), None);

    let mut frozen = MockBackend::new("frozen");
    let err = run_exp2(&train, &test, task, &mut frozen, &FineTuneSettings::default(), &templates, &mut store, &opts(), MultiLabelMode::default())
        .unwrap_err();
    assert!(matches!(err, PipelineError::Backend(BackendError::BackendLacksTraining(_))), "{err}");

    let leaky = mv_corpus(&[("t1", "a", "motivational")]);
    let err = run_exp2(&train, &leaky, task, &mut backend, &FineTuneSettings::default(), &templates, &mut store, &opts(), MultiLabelMode::default())
        .unwrap_err();
    assert!(matches!(err, PipelineError::PartitionViolation(ref ids) if ids == &["t1"]), "{err}");
    assert_eq!(backend.tuned_with(), None);
}

#[test]
fn exp3_excludes_or_rejects_missing_explanations() {
    let corpus = synthetic::balanced(TaskId::SN, 30, 2);
    let task = TaskSpec::get(TaskId::SN);
    let backend = MockBackend::new("vlm").with_scripted(synthetic::gold_answers(&corpus, TaskId::SN)).with_refusals(["bal_0003", "bal_0007"]);
    let strategy = PromptStrategy::for_task(StrategyKind::ZSC, task);
    let mut store = ExplanationStore::in_memory();
    let report = generate_explanations(corpus.samples(), task, &backend, &strategy, &[], &PromptTemplateSet::default_set(), &mut store, &opts()).unwrap();
    assert_eq!(report.flagged.len(), 2);

    let (train, test) = memescope::corpus::split(&corpus, 0.5, 2).unwrap();
    let mut clf = ReferenceClassifier::new();
    let outcome = run_covexfil(&train, &test, task, &store, "vlm", StrategyKind::ZSC, &mut clf, 0, &CovexfilOptions::default()).unwrap();
    let excluded_expected: Vec<String> = test
        .samples()
        .iter()
        .filter(|s| ["bal_0003", "bal_0007"].contains(&s.sample_id.as_str()))
        .map(|s| s.sample_id.clone())
        .collect();
    assert_eq!(outcome.excluded, excluded_expected);
    assert_eq!(outcome.predictions.len() + outcome.excluded.len(), test.len());

    let strict = CovexfilOptions {
        strict: true,
        ..CovexfilOptions::default()
    };
    let err = run_covexfil(&train, &test, task, &store, "vlm", StrategyKind::ZSC, &mut clf, 0, &strict).unwrap_err();
    assert!(matches!(err, PipelineError::MissingExplanations(ref ids) if ids.len() == 2), "{err}");

    let err = run_covexfil(&train, &train, task, &store, "vlm", StrategyKind::ZSC, &mut clf, 0, &CovexfilOptions::default())
        .unwrap_err();
    assert!(matches!(err, PipelineError::PartitionViolation(_)));
}

#[test]
fn exp3_multilabel_predicts_singletons() {
    let corpus = synthetic::mami(60, 4);
    let task = TaskSpec::get(TaskId::MGT);
    let backend = MockBackend::new("vlm").with_scripted(synthetic::gold_answers(&corpus, TaskId::MGT));
    let strategy = PromptStrategy::for_task(StrategyKind::ZS, task);
    let mut store = ExplanationStore::in_memory();
    generate_explanations(corpus.samples(), task, &backend, &strategy, &[], &PromptTemplateSet::default_set(), &mut store, &opts()).unwrap();
    let (train, test) = memescope::corpus::split(&corpus, 0.25, 4).unwrap();
    let mut clf = ReferenceClassifier::new();
    let outcome = run_covexfil(&train, &test, task, &store, "vlm", StrategyKind::ZS, &mut clf, 0, &CovexfilOptions::default()).unwrap();
    for p in &outcome.predictions {
        match &p.predicted {
            Prediction::Labels(set) => assert_eq!(set.len(), 1),
            other => panic!("{other:?}"),
        }
    }
    assert!((0.0..=1.0).contains(&outcome.report.weighted_f1));
}

#[test]
fn exp1_multilabel_modes() {
    let corpus = synthetic::mami(30, 5);
    let (train, test) = memescope::corpus::split(&corpus, 0.3, 5).unwrap();
    let task = TaskSpec::get(TaskId::MGT);
    let backend = MockBackend::new("vlm").with_scripted(synthetic::gold_answers(&corpus, TaskId::MGT));
    let strategy = PromptStrategy::for_task(StrategyKind::ZS, task);
    let templates = PromptTemplateSet::default_set();

    let mut store = ExplanationStore::in_memory();
    let multi = run_exp1(&test, &train, task, &backend, &strategy, &templates, 0, &mut store, &opts(), MultiLabelMode::MultiLabel).unwrap();
    assert!(multi.predictions.iter().all(|p| p.is_correct()), "scripted gold answers are always right");

    let forced = run_exp1(&test, &train, task, &backend, &strategy, &templates, 0, &mut store, &opts(), MultiLabelMode::ForcedSingle).unwrap();
    assert_eq!(forced.generated, 0, "raw outputs are shared between modes");
    for p in &forced.predictions {
        if let Prediction::Labels(set) = &p.predicted {
            assert!(set.len() <= 1);
        }
    }
}

#[test]
fn aborted_run_keeps_manifest_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synthetic::memotion(20, 1);
    let mut backend = MockBackend::new("down").unavailable();
    let spec = RunSpec::new(Experiment::Exp1, TaskId::SN, StrategyKind::ZS);
    let runtime = Runtime {
        clock: Clock::Fixed(0),
        ..Runtime::default()
    };
    let err = run_experiment(&spec, &corpus, &mut backend, &PromptTemplateSet::default_set(), dir.path(), &runtime, None)
        .unwrap_err();
    assert!(matches!(err, PipelineError::RunAborted { .. }), "{err}");
    assert!(dir.path().join(MANIFEST_FILE).exists());
    assert!(!dir.path().join(PREDICTIONS_FILE).exists());
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert!(log.contains("run failed"), "{log}");
    assert_eq!(RunManifest::read(dir.path()).unwrap().backend_id, "down");
}

#[test]
fn partial_refusals_are_flagged_and_scored_as_misses() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synthetic::balanced(TaskId::MV, 20, 9);
    let (_, test) = memescope::corpus::split(&corpus, 0.5, 9).unwrap();
    let refused: BTreeSet<String> = test.samples().iter().take(3).map(|s| s.sample_id.clone()).collect();
    let mut backend = MockBackend::new("vlm")
        .with_scripted(synthetic::gold_answers(&corpus, TaskId::MV))
        .with_refusals(refused.iter().cloned());
    let mut spec = RunSpec::new(Experiment::Exp1, TaskId::MV, StrategyKind::ZS).with_seed(9);
    spec.test_fraction = 0.5;
    let runtime = Runtime {
        clock: Clock::Fixed(0),
        ..Runtime::default()
    };
    let summary = run_experiment(&spec, &corpus, &mut backend, &PromptTemplateSet::default_set(), dir.path(), &runtime, None).unwrap();
    let flagged: BTreeSet<String> = summary.metrics.flagged.iter().map(|f| f.sample_id.clone()).collect();
    assert_eq!(flagged, refused);
    assert_eq!(summary.metrics.report.unparsed, 3);
    assert_eq!(summary.metrics.report.instances, 10);
}
