//! Attach an external model through the backend plugin contract. The local
//! process backend here is a shell one-liner standing in for a real model
//! server; a remote entry would name an HTTP endpoint instead.

use memescope::backends::{BackendKind, BackendSpec};
use memescope::corpus::TaskId;
use memescope::pipeline::{run_experiment, Clock, Experiment, RunSpec, Runtime};
use memescope::prompting::{PromptTemplateSet, StrategyKind};
use memescope::synthetic;

#[derive(serde::Deserialize)]
struct Plugins {
    backends: Vec<BackendSpec>,
}

const PLUGINS: &str = r#"
[[backends]]
backend_id = "shell-vlm"
kind = "local"
command = "sh"
# reads one JSON request on stdin, always answers "neutral"
args = ["-c", "cat > /dev/null; printf '%s' '{\"text\": \"The picture is ambiguous.\\nAnswer: neutral\"}'"]
max_concurrency = 2
supports_few_shot = false
retry = { retries = 1, backoff_ms = 10 }

[[backends]]
backend_id = "hosted-vlm"
kind = "remote"
endpoint = "http://127.0.0.1:9/v1/generate"
max_concurrency = 8
supports_training = true
generation = { temperature = 0.0, max_new_tokens = 256, stop_sequences = [], request_timeout = 30 }
"#;

pub fn main() {
    let plugins: Plugins = toml::from_str(PLUGINS).expect("plugin table parses");
    for spec in &plugins.backends {
        let backend = spec.build().expect("spec is complete");
        println!(
            "{} ({:?}): few-shot {}, training {}, max concurrency {}",
            backend.backend_id(),
            spec.kind,
            backend.capabilities().supports_few_shot,
            backend.capabilities().supports_training,
            backend.max_concurrency()
        );
    }

    let local = plugins.backends.iter().find(|s| s.kind == BackendKind::Local).unwrap();
    let mut backend = local.build().unwrap();
    let corpus = synthetic::memotion(20, 2);
    let dir = tempfile::tempdir().expect("temp dir");
    let runtime = Runtime { concurrency: 2, clock: Clock::Fixed(0), ..Runtime::default() };
    let spec = RunSpec::new(Experiment::Exp1, TaskId::SN, StrategyKind::ZSC);
    let summary = run_experiment(&spec, &corpus, backend.as_mut(), &PromptTemplateSet::default_set(), dir.path(), &runtime, None)
        .expect("run completes");
    println!("{} via {}: {}", summary.metrics.task, summary.metrics.backend_id, summary.metrics.report.summary());

    // The capability check happens before any generation.
    let few_shot = RunSpec::new(Experiment::Exp1, TaskId::SN, StrategyKind::FS);
    let err = run_experiment(&few_shot, &corpus, backend.as_mut(), &PromptTemplateSet::default_set(), dir.path(), &runtime, None)
        .unwrap_err();
    println!("rejected: {err}");
}
