//! Two-step classification: collect a backend's explanations for every
//! meme, then train a text classifier on the explanations alone.

use memescope::backends::{MockBackend, ReferenceClassifier};
use memescope::corpus::{self, TaskId, TaskSpec};
use memescope::pipeline::{
    generate_explanations, run_covexfil, Clock, CovexfilOptions, ExplanationStore, GenerationOptions,
};
use memescope::prompting::{PromptStrategy, PromptTemplateSet, StrategyKind};
use memescope::synthetic;

pub fn main() {
    let task = TaskSpec::get(TaskId::SN);
    let corpus = synthetic::balanced(TaskId::SN, 150, 8);
    let templates = PromptTemplateSet::default_set();
    let opts = GenerationOptions {
        concurrency: 4,
        clock: Clock::Fixed(0),
        ..GenerationOptions::default()
    };
    let strategy = PromptStrategy::for_task(StrategyKind::ZSC, task);

    // An explainer whose text names the gold label, and one that guesses.
    let informed = MockBackend::new("informed").with_scripted(synthetic::gold_answers(&corpus, TaskId::SN)).with_max_concurrency(4);
    let guessing = MockBackend::new("guessing").with_max_concurrency(4);

    let mut store = ExplanationStore::in_memory();
    for backend in [&informed, &guessing] {
        let report = generate_explanations(corpus.samples(), task, backend, &strategy, &[], &templates, &mut store, &opts)
            .expect("generation");
        println!("generated {} explanations", report.generated);
    }
    let (train, test) = corpus::split(&corpus, 0.3, 8).expect("split");

    for backend_id in ["informed", "guessing"] {
        for append_caption in [false, true] {
            let mut clf = ReferenceClassifier::new();
            let options = CovexfilOptions { append_caption, strict: false };
            let out = run_covexfil(&train, &test, task, &store, backend_id, StrategyKind::ZSC, &mut clf, 8, &options)
                .expect("classifier trains");
            println!("{backend_id:<9} caption={append_caption:<5} {}", out.report.summary());
        }
    }

    let shuffled = synthetic::shuffle_labels(&train, TaskId::SN, 1);
    let mut clf = ReferenceClassifier::new();
    let out = run_covexfil(&shuffled, &test, task, &store, "informed", StrategyKind::ZSC, &mut clf, 8, &CovexfilOptions::default())
        .expect("classifier trains");
    println!("informed, shuffled training labels: {}", out.report.summary());
    let sample = &test.samples()[0];
    let record = store.latest(&sample.sample_id, "informed", StrategyKind::ZSC).expect("explained");
    println!("\nexplanation for {}:\n{}", sample.sample_id, record.explanation);
}
