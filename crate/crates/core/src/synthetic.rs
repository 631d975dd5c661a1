//! Seeded synthetic corpora for offline runs, examples, and tests.
//!
//! Captions are drawn from a small neutral word bank that shares no token
//! with any label vocabulary, so a caption alone never names a label.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Dataset, Gold, MemeSample, TaskId, TaskSpec};

const WORDS: [&str; 48] = [
    "when", "monday", "coffee", "boss", "cat", "dog", "exam", "weekend", "homework", "pizza",
    "traffic", "alarm", "mom", "dad", "friends", "party", "deadline", "code", "bug", "server",
    "gym", "diet", "rain", "summer", "winter", "phone", "battery", "wifi", "meeting", "email",
    "teacher", "class", "game", "night", "morning", "sleep", "money", "rent", "salary", "vacation",
    "movie", "music", "dance", "car", "bus", "train", "queue", "finally",
];

fn caption(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=12);
    (0..len)
        .map(|_| *WORDS.choose(rng).expect("word bank is non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn pick(task: TaskId, rng: &mut ChaCha8Rng) -> Gold {
    let labels = &TaskSpec::get(task).labels;
    Gold::Single(labels[rng.gen_range(0..labels.len())].clone())
}

/// `n` Memotion-style samples with uniformly drawn labels for all five
/// Memotion tasks.
pub fn memotion(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = Dataset::Memotion.tasks().to_vec();
    let samples = (0..n)
        .map(|i| {
            let gold = tasks.iter().map(|&t| (t, pick(t, &mut rng))).collect();
            MemeSample {
                sample_id: format!("syn_{i:04}"),
                image_ref: format!("images/syn_{i:04}.jpg"),
                caption: caption(&mut rng),
                gold,
            }
        })
        .collect();
    Corpus::new(Dataset::Memotion, tasks, samples).expect("synthetic corpus is valid")
}

/// `n` MAMI-style samples. Misogynous samples carry one or two type labels;
/// the others carry none.
pub fn mami(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let types = &TaskSpec::get(TaskId::MGT).labels;
    let samples = (0..n)
        .map(|i| {
            let misogynous = rng.gen_bool(0.5);
            let mut kinds = BTreeSet::new();
            if misogynous {
                let count = rng.gen_range(1..=2);
                kinds.extend(types.choose_multiple(&mut rng, count).cloned());
            }
            let mg = if misogynous { "misogynous" } else { "non_misogynous" };
            MemeSample {
                sample_id: format!("mami_{i:04}"),
                image_ref: format!("images/mami_{i:04}.jpg"),
                caption: caption(&mut rng),
                gold: BTreeMap::from([
                    (TaskId::MG, Gold::Single(mg.to_string())),
                    (TaskId::MGT, Gold::Multi(kinds)),
                ]),
            }
        })
        .collect();
    Corpus::new(Dataset::Mami, vec![TaskId::MG, TaskId::MGT], samples).expect("synthetic corpus is valid")
}

/// Single-task corpus whose labels cycle through the vocabulary, so every
/// label has `n / K` samples (the first `n % K` labels one more).
pub fn balanced(task: TaskId, n: usize, seed: u64) -> Corpus {
    let spec = TaskSpec::get(task);
    assert!(!spec.multi_label, "balanced corpora are single-label");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<&String> = (0..n).map(|i| &spec.labels[i % spec.labels.len()]).collect();
    labels.shuffle(&mut rng);
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| MemeSample {
            sample_id: format!("bal_{i:04}"),
            image_ref: format!("images/bal_{i:04}.jpg"),
            caption: caption(&mut rng),
            gold: BTreeMap::from([(task, Gold::Single(label.clone()))]),
        })
        .collect();
    Corpus::new(task.dataset(), vec![task], samples).expect("synthetic corpus is valid")
}

/// `(sample_id, gold)` pairs for scripting a mock backend to answer with the
/// gold label. Multi-label golds are comma-joined, empty sets become "none".
pub fn gold_answers(corpus: &Corpus, task: TaskId) -> Vec<(String, String)> {
    corpus
        .samples()
        .iter()
        .filter_map(|s| {
            let answer = match s.gold_for(task)? {
                Gold::Single(l) => l.clone(),
                Gold::Multi(set) if set.is_empty() => "none".to_string(),
                Gold::Multi(set) => set.iter().cloned().collect::<Vec<_>>().join(", "),
            };
            Some((s.sample_id.clone(), answer))
        })
        .collect()
}

/// Copy of `corpus` with the gold labels of `task` permuted across samples.
pub fn shuffle_labels(corpus: &Corpus, task: TaskId, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut golds: Vec<Gold> = corpus
        .samples()
        .iter()
        .filter_map(|s| s.gold_for(task).cloned())
        .collect();
    golds.shuffle(&mut rng);
    let mut golds = golds.into_iter();
    let samples = corpus
        .samples()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if s.gold.contains_key(&task) {
                s.gold.insert(task, golds.next().expect("one gold per sample"));
            }
            s
        })
        .collect();
    Corpus::new(corpus.dataset(), corpus.tasks().to_vec(), samples).expect("permuted corpus is valid")
}
