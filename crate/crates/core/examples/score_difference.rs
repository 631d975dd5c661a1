//! Compare how close explanations of correct and incorrect predictions are
//! to silver reference explanations.

use std::collections::BTreeMap;

use memescope::analysis::score_diff_analysis;
use memescope::backends::{MockBackend, ReferenceClassifier};
use memescope::corpus::{self, TaskId, TaskSpec};
use memescope::metrics::TfCosineScorer;
use memescope::pipeline::{
    generate_explanations, run_covexfil, Clock, CovexfilOptions, ExplanationStore, GenerationOptions,
};
use memescope::prompting::{PromptStrategy, PromptTemplateSet, StrategyKind};
use memescope::synthetic;

pub fn main() {
    let task = TaskSpec::get(TaskId::SN);
    let corpus = synthetic::balanced(TaskId::SN, 120, 12);
    // the explainer misreads every third meme as the next label over
    let answers = synthetic::gold_answers(&corpus, TaskId::SN).into_iter().enumerate().map(|(i, (id, gold))| {
        let at = task.label_index(&gold).unwrap();
        let answer = if i % 3 == 0 { task.labels[(at + 1) % task.labels.len()].clone() } else { gold };
        (id, answer)
    });
    let backend = MockBackend::new("vlm").with_scripted(answers);
    let strategy = PromptStrategy::for_task(StrategyKind::ZSC, task);
    let opts = GenerationOptions { clock: Clock::Fixed(0), ..GenerationOptions::default() };
    let mut store = ExplanationStore::in_memory();
    generate_explanations(corpus.samples(), task, &backend, &strategy, &[], &PromptTemplateSet::default_set(), &mut store, &opts)
        .expect("generation");

    let (train, test) = corpus::split(&corpus, 0.3, 12).expect("split");
    let mut clf = ReferenceClassifier::new();
    let out = run_covexfil(&train, &test, task, &store, "vlm", StrategyKind::ZSC, &mut clf, 0, &CovexfilOptions::default())
        .expect("classifier trains");
    println!("classifier: {}", out.report.summary());

    // Silver references state the gold reading.
    let references: BTreeMap<String, String> = test
        .samples()
        .iter()
        .map(|s| (s.sample_id.clone(), format!("Overall the meme comes across as {}.", s.gold[&TaskId::SN])))
        .collect();
    for report in score_diff_analysis(&out.predictions, &store, &references, &TfCosineScorer).expect("analysis") {
        println!("{report}");
    }

    // With every prediction correct the difference is undefined and flagged.
    let all_correct: Vec<_> = out.predictions.iter().filter(|p| p.is_correct()).cloned().collect();
    for report in score_diff_analysis(&all_correct, &store, &references, &TfCosineScorer).expect("analysis") {
        println!("{report}");
    }
}
