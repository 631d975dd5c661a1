//! Classification and text-overlap metrics.

use std::collections::BTreeSet;

use memescope::metrics::{bleu, ngram_scores, rouge, semantic_score, weighted_f1, weighted_f1_multilabel, RougeKind, TfCosineScorer};

pub fn main() {
    let labels: Vec<String> = ["positive", "neutral", "negative"].map(String::from).to_vec();
    let golds = ["positive", "positive", "positive", "neutral", "negative", "negative"];
    let preds = [Some("positive"), Some("positive"), Some("neutral"), None, Some("negative"), Some("positive")];
    let report = weighted_f1(&preds, &golds, &labels).expect("aligned inputs");
    print!("{report}");

    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    let types: Vec<String> = ["shaming", "stereotype", "objectification", "violence"].map(String::from).to_vec();
    let gold_sets = [set(&["shaming"]), set(&["stereotype", "violence"]), set(&[])];
    let pred_sets = [set(&["shaming"]), set(&["stereotype"]), set(&["objectification"])];
    println!("multi-label {}", weighted_f1_multilabel(&pred_sets, &gold_sets, &types).unwrap().summary());

    let r1 = rouge("the cat sat", "the cat", RougeKind::N(1)).unwrap();
    let rl = rouge("a b c d", "a c d", RougeKind::L).unwrap();
    println!("ROUGE-1 P {:.4} R {:.4} F {:.4}; ROUGE-L F {:.4}", r1.precision, r1.recall, r1.f1, rl.f1);

    let refs = ["the cat is on the mat", "a dog barks at the mailman"];
    println!("BLEU identical {:.4}", bleu(&refs, &refs, 4).unwrap().score);
    let b = bleu(&["the the the the"], &["the cat"], 4).unwrap();
    println!("BLEU repeated token: unigram precision {:.2}, score {:.4}", b.precisions[0], b.score);

    let explanation = "The meme mocks the boss for scheduling a meeting on Friday evening.";
    let silver = "It makes fun of a boss who sets a late Friday meeting.";
    let s = ngram_scores(explanation, silver).unwrap();
    println!(
        "explanation vs silver: R1 {:.3} R2 {:.3} RL {:.3} BLEU {:.3} tf-cosine {:.3}",
        s.rouge_1.f1,
        s.rouge_2.f1,
        s.rouge_l.f1,
        s.bleu.score,
        semantic_score(&TfCosineScorer, explanation, silver).unwrap()
    );
}
