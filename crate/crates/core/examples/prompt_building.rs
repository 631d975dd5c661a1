//! Render the four prompting strategies for one meme and parse answers
//! back into labels.

use std::collections::BTreeMap;

use memescope::corpus::{MemeSample, TaskId, TaskSpec};
use memescope::prompting::{
    build_prompt, parse_label, parse_multilabel, select_exemplars, PromptStrategy, PromptTemplateSet, StrategyKind,
    DEFAULT_ANSWER_MARKER,
};
use memescope::synthetic;

pub fn main() {
    let task = TaskSpec::get(TaskId::SN);
    let templates = PromptTemplateSet::default_set();
    let pool = synthetic::memotion(40, 1);
    let meme = MemeSample {
        sample_id: "demo".into(),
        image_ref: "demo.jpg".into(),
        caption: "me pretending to understand the meeting".into(),
        gold: BTreeMap::new(),
    };

    for kind in StrategyKind::ALL {
        let strategy = PromptStrategy::for_task(kind, task);
        let exemplars = if kind.is_few_shot() {
            select_exemplars(&pool, task, strategy.shot_count, 7).expect("pool has samples")
        } else {
            Vec::new()
        };
        let prompt = build_prompt(task, &strategy, &meme, &exemplars, &templates).expect("template exists");
        println!("===== {kind} ({} shots) =====\n{prompt}\n", exemplars.len());
    }

    for raw in [
        "The caption is self-deprecating.\nAnswer: Neutral",
        "Step 3: overall this reads as negative",
        "I cannot tell.",
    ] {
        let parsed = parse_label(raw, task, DEFAULT_ANSWER_MARKER);
        println!("{:?} -> {:?} via {:?}", raw, parsed.label, parsed.match_rule);
    }

    let mgt = TaskSpec::get(TaskId::MGT);
    println!(
        "multi-label: {:?}",
        parse_multilabel("Answer: shaming, objectification", mgt, DEFAULT_ANSWER_MARKER)
    );
}
