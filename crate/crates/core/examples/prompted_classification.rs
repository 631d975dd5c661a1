//! Classify memes by prompting a backend (the offline mock here) under each
//! strategy, and score the answers with weighted F1.

use memescope::backends::{GenerationBackend, MockBackend};
use memescope::corpus::{self, TaskId, TaskSpec};
use memescope::pipeline::{run_exp1, Clock, ExplanationStore, GenerationOptions, MultiLabelMode};
use memescope::prompting::{PromptStrategy, PromptTemplateSet, StrategyKind};
use memescope::synthetic;

pub fn main() {
    let corpus = synthetic::memotion(60, 3);
    let (train, test) = corpus::split(&corpus, 0.25, 3).expect("split");
    let task = TaskSpec::get(TaskId::OF);
    let templates = PromptTemplateSet::default_set();
    let opts = GenerationOptions {
        concurrency: 4,
        clock: Clock::Fixed(0),
        ..GenerationOptions::default()
    };

    // Answers are hash-picked from the listed labels: roughly chance level.
    let guesser = MockBackend::new("guesser").with_max_concurrency(4);
    // Scripted with the gold labels of all but every fourth sample.
    let answers = synthetic::gold_answers(&corpus, TaskId::OF)
        .into_iter()
        .enumerate()
        .filter(|(i, _)| i % 4 != 0)
        .map(|(_, a)| a);
    let oracle = MockBackend::new("mostly-right").with_scripted(answers).with_max_concurrency(4);

    let mut store = ExplanationStore::in_memory();
    for backend in [&guesser, &oracle] {
        for kind in StrategyKind::ALL {
            let strategy = PromptStrategy::for_task(kind, task);
            let out = run_exp1(&test, &train, task, backend, &strategy, &templates, 3, &mut store, &opts, MultiLabelMode::default())
                .expect("exp1 runs");
            println!("{:<13} {:<3} {}", backend.backend_id(), kind.as_str(), out.report.summary());
        }
    }
    println!("{} raw outputs cached", store.len());
}
