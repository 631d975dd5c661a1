//! One experiment end to end: a run directory with manifest, cached raw
//! outputs, predictions, metrics and log, then a cached rerun and a replay
//! from the manifest.

use memescope::backends::MockBackend;
use memescope::corpus::TaskId;
use memescope::pipeline::{
    read_predictions, run_experiment, snapshot_dir, Clock, Experiment, RunManifest, RunSpec, Runtime,
};
use memescope::prompting::{PromptTemplateSet, StrategyKind};
use memescope::synthetic;

pub fn main() {
    let corpus = synthetic::memotion(50, 21);
    let templates = PromptTemplateSet::default_set();
    let runtime = Runtime { concurrency: 8, clock: Clock::Fixed(0), ..Runtime::default() };
    let mut spec = RunSpec::new(Experiment::Exp3, TaskId::HM, StrategyKind::FSC).with_seed(21);
    spec.shots = Some(2);
    spec.append_caption = true;

    let root = tempfile::tempdir().expect("temp dir");
    let first = root.path().join("first");
    let mut backend = MockBackend::new("mock").with_max_concurrency(8);
    let summary = run_experiment(&spec, &corpus, &mut backend, &templates, &first, &runtime, None).expect("run");
    println!("run {} generated {} outputs", summary.manifest.run_id, summary.generated);
    for (name, bytes) in snapshot_dir(&first).unwrap() {
        println!("  {name:<20} {:>7} bytes", bytes.len());
    }
    let manifest = RunManifest::read(&first).unwrap();
    println!(
        "manifest: {:?} {} {} shots={} exemplars={:?} corpus={}",
        manifest.experiment,
        manifest.backend_id,
        manifest.strategy,
        manifest.shot_count,
        manifest.exemplar_ids,
        &manifest.corpus_hash[..12]
    );
    let preds = read_predictions(&first).unwrap();
    println!("{} predictions, first: {} -> {}", preds.len(), preds[0].sample_id, preds[0].predicted);

    // Rebuild the RunSpec from the manifest and run into a fresh directory.
    let replayed_spec = RunSpec {
        experiment: manifest.experiment,
        task: manifest.tasks[0],
        strategy: manifest.strategy,
        shots: Some(manifest.shot_count),
        seed: manifest.seeds.split,
        test_fraction: manifest.config.test_fraction,
        generation: manifest.config.generation.clone(),
        append_caption: manifest.config.append_caption,
        strict_explanations: manifest.config.strict_explanations,
        multilabel_mode: manifest.config.multilabel_mode,
        abort_fraction: manifest.config.abort_fraction,
        ..spec.clone()
    };
    let replay = root.path().join("replay");
    let mut fresh = MockBackend::new("mock");
    run_experiment(&replayed_spec, &corpus, &mut fresh, &templates, &replay, &Runtime { concurrency: 1, ..runtime }, None)
        .expect("replay");
    println!("replay identical: {}", snapshot_dir(&first).unwrap() == snapshot_dir(&replay).unwrap());

    // Only run.log differs from a fresh run: it records cache hits.
    backend.reset_calls();
    let again = run_experiment(&spec, &corpus, &mut backend, &templates, &first, &runtime, None).expect("rerun");
    println!("rerun in place: {} generated, {} cached, {} backend calls", again.generated, again.cached, backend.calls());
}
