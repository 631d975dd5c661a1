//! Validate adapter hyperparameters, hand (caption, label) pairs to a
//! trainable backend, and evaluate the tuned backend zero-shot.

use memescope::backends::{validate_finetune_config, FineTuneSettings, MockBackend};
use memescope::corpus::{self, Corpus, TaskId, TaskSpec};
use memescope::pipeline::{run_exp2, Clock, ExplanationStore, GenerationOptions, MultiLabelMode};
use memescope::prompting::PromptTemplateSet;
use memescope::synthetic;

/// Copy of `test` in which the first `n` samples reuse train captions, so a
/// backend that memorized its training pairs can recognize them.
fn with_collisions(train: &Corpus, test: &Corpus, n: usize) -> Corpus {
    let samples = test
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut s = s.clone();
            if i < n {
                let src = &train.samples()[i];
                s.caption = src.caption.clone();
                s.gold = src.gold.clone();
            }
            s
        })
        .collect();
    Corpus::new(test.dataset(), test.tasks().to_vec(), samples).expect("valid corpus")
}

pub fn main() {
    let defaults = validate_finetune_config(&FineTuneSettings::default()).expect("shipped defaults are valid");
    println!(
        "defaults: rank {} alpha {} (alpha/rank {}) lr {:e} epochs {} optimizer {} targets {:?}",
        defaults.rank,
        defaults.alpha,
        defaults.alpha_rank_ratio(),
        defaults.learning_rate,
        defaults.epochs,
        defaults.optimizer_id,
        defaults.target_layer_groups
    );
    for bad in [
        FineTuneSettings { rank: Some(0), ..Default::default() },
        FineTuneSettings { learning_rate: Some(0.0), ..Default::default() },
        FineTuneSettings { epochs: Some(-1), ..Default::default() },
    ] {
        println!("rejected: {}", validate_finetune_config(&bad).unwrap_err());
    }

    let corpus = synthetic::memotion(80, 4);
    let (train, test) = corpus::split(&corpus, 0.25, 4).expect("split");
    let task = TaskSpec::get(TaskId::MV);
    let templates = PromptTemplateSet::default_set();
    let opts = GenerationOptions {
        clock: Clock::Fixed(0),
        ..GenerationOptions::default()
    };
    for collisions in [0, test.len() / 2, test.len()] {
        let test = with_collisions(&train, &test, collisions);
        let mut backend = MockBackend::trainable("vlm");
        let mut store = ExplanationStore::in_memory();
        let settings = FineTuneSettings { rank: Some(8), ..Default::default() };
        let (cfg, out) = run_exp2(&train, &test, task, &mut backend, &settings, &templates, &mut store, &opts, MultiLabelMode::default())
            .expect("exp2 runs");
        println!(
            "rank {} alpha/rank {}: {collisions:>2}/{} test captions seen in training -> {}",
            cfg.rank,
            cfg.alpha_rank_ratio(),
            test.len(),
            out.report.summary()
        );
    }
}
