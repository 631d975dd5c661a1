//! Classification and text-overlap metrics.
//!
//! Weighted F1 weights each label's F1 by its gold support, which keeps the
//! score honest on the heavily imbalanced meme tasks. Any precision or
//! recall with a zero denominator is 0, and F1 of (0, 0) is 0.
//!
//! Text metrics (ROUGE-1/2/L, corpus BLEU, the default semantic scorer) all
//! share [`crate::text::tokenize`].

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{self, TermVector};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction and gold lists differ in length ({preds} vs {golds})")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no instances to score")]
    EmptyInput,
    #[error("label `{0}` is not in the task vocabulary")]
    UnknownLabel(String),
    #[error("reference text is empty after tokenization")]
    EmptyReference,
    #[error("text is empty after tokenization")]
    EmptyText,
    #[error("task is not multi-label")]
    NotMultiLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self::new(precision, recall)
    }

    fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub weighted_f1: f64,
    pub weighted_precision: f64,
    /// Per-label scores in vocabulary order.
    pub per_label: Vec<LabelScore>,
    pub instances: usize,
    /// Predictions that carried no label.
    pub unparsed: usize,
}

impl MetricReport {
    pub fn label(&self, label: &str) -> Option<&LabelScore> {
        self.per_label.iter().find(|l| l.label == label)
    }

    fn from_scores(per_label: Vec<LabelScore>, instances: usize, unparsed: usize) -> Self {
        let total: usize = per_label.iter().map(|l| l.support).sum();
        let weighted = |f: fn(&LabelScore) -> f64| {
            if total == 0 {
                0.0
            } else {
                per_label
                    .iter()
                    .map(|l| l.support as f64 / total as f64 * f(l))
                    .sum()
            }
        };
        MetricReport {
            weighted_f1: weighted(|l| l.f1),
            weighted_precision: weighted(|l| l.precision),
            per_label,
            instances,
            unparsed,
        }
    }

    /// One-line summary with 4-decimal rounding.
    pub fn summary(&self) -> String {
        format!(
            "weighted_f1={:.4} weighted_precision={:.4} n={} unparsed={}",
            self.weighted_f1, self.weighted_precision, self.instances, self.unparsed
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.summary())?;
        let width = self.per_label.iter().map(|l| l.label.len()).max().unwrap_or(5).max(5);
        writeln!(
            f,
            "  {:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            "label", "precision", "recall", "f1", "support"
        )?;
        for l in &self.per_label {
            writeln!(
                f,
                "  {:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                l.label, l.precision, l.recall, l.f1, l.support
            )?;
        }
        Ok(())
    }
}

/// Support-weighted F1 for single-label predictions. `None` marks an
/// unparsed prediction: a miss for its gold label that is charged to no
/// other label.
pub fn weighted_f1<P, G>(
    preds: &[Option<P>],
    golds: &[G],
    labels: &[String],
) -> Result<MetricReport, MetricsError>
where
    P: AsRef<str>,
    G: AsRef<str>,
{
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let index: HashMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let lookup = |label: &str| {
        index
            .get(label)
            .copied()
            .ok_or_else(|| MetricsError::UnknownLabel(label.to_string()))
    };

    let k = labels.len();
    let (mut tp, mut fp, mut fn_) = (vec![0; k], vec![0; k], vec![0; k]);
    let mut unparsed = 0;
    for (pred, gold) in preds.iter().zip(golds) {
        let g = lookup(gold.as_ref())?;
        match pred {
            None => {
                unparsed += 1;
                fn_[g] += 1;
            }
            Some(p) => {
                let p = lookup(p.as_ref())?;
                if p == g {
                    tp[g] += 1;
                } else {
                    fp[p] += 1;
                    fn_[g] += 1;
                }
            }
        }
    }
    let per_label = labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let prf = Prf::from_counts(tp[i], fp[i], fn_[i]);
            LabelScore {
                label: label.clone(),
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
                support: tp[i] + fn_[i],
            }
        })
        .collect();
    Ok(MetricReport::from_scores(per_label, preds.len(), unparsed))
}

/// Support-weighted F1 over per-label indicator vectors, for multi-label
/// tasks. Support is the number of gold sets containing the label.
pub fn weighted_f1_multilabel(
    preds: &[BTreeSet<String>],
    golds: &[BTreeSet<String>],
    labels: &[String],
) -> Result<MetricReport, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let known: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    if let Some(bad) = preds
        .iter()
        .chain(golds)
        .flatten()
        .find(|l| !known.contains(l.as_str()))
    {
        return Err(MetricsError::UnknownLabel(bad.clone()));
    }
    let per_label = labels
        .iter()
        .map(|label| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (p, g) in preds.iter().zip(golds) {
                match (p.contains(label), g.contains(label)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let prf = Prf::from_counts(tp, fp, fn_);
            LabelScore {
                label: label.clone(),
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
                support: tp + fn_,
            }
        })
        .collect();
    let unparsed = 0;
    Ok(MetricReport::from_scores(per_label, preds.len(), unparsed))
}

/// Plain accuracy with unparsed predictions counted wrong.
pub fn accuracy<P: AsRef<str>, G: AsRef<str>>(preds: &[Option<P>], golds: &[G]) -> f64 {
    let correct = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref().is_some_and(|p| p.as_ref() == g.as_ref()))
        .count();
    ratio(correct, preds.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeKind {
    N(usize),
    L,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

fn clipped_overlap(cand: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    cand.iter()
        .map(|(gram, &c)| c.min(reference.get(gram).copied().unwrap_or(0)))
        .sum()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-n (clipped n-gram overlap) or ROUGE-L (longest common subsequence).
pub fn rouge(candidate: &str, reference: &str, kind: RougeKind) -> Result<Prf, MetricsError> {
    let cand = text::tokenize(candidate);
    let refs = text::tokenize(reference);
    if refs.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let (overlap, cand_total, ref_total) = match kind {
        RougeKind::N(n) => {
            let c = ngram_counts(&cand, n);
            let r = ngram_counts(&refs, n);
            (
                clipped_overlap(&c, &r),
                c.values().sum::<usize>(),
                r.values().sum::<usize>(),
            )
        }
        RougeKind::L => (lcs_len(&cand, &refs), cand.len(), refs.len()),
    };
    Ok(Prf::new(ratio(overlap, cand_total), ratio(overlap, ref_total)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    pub score: f64,
    /// Pooled modified precisions p_1..p_max_n.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

/// Corpus BLEU without smoothing: clipped n-gram counts pooled over all
/// pairs, geometric mean of p_1..p_max_n, and a brevity penalty on the
/// pooled lengths. Any zero precision makes the score 0.
pub fn bleu(candidates: &[&str], references: &[&str], max_n: usize) -> Result<Bleu, MetricsError> {
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            preds: candidates.len(),
            golds: references.len(),
        });
    }
    if candidates.is_empty() || max_n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        let c = text::tokenize(c);
        let r = text::tokenize(r);
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            matched[n - 1] += clipped_overlap(&cc, &rc);
            total[n - 1] += cc.values().sum::<usize>();
        }
    }
    let precisions: Vec<f64> = matched.iter().zip(&total).map(|(&m, &t)| ratio(m, t)).collect();
    let brevity_penalty = if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp().min(1.0)
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        brevity_penalty * log_mean.exp()
    };
    Ok(Bleu {
        score,
        precisions,
        brevity_penalty,
        candidate_length: cand_len,
        reference_length: ref_len,
    })
}

/// All n-gram scores for one candidate/reference pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramScores {
    pub rouge_1: Prf,
    pub rouge_2: Prf,
    pub rouge_l: Prf,
    pub bleu: Bleu,
}

pub fn ngram_scores(candidate: &str, reference: &str) -> Result<NGramScores, MetricsError> {
    Ok(NGramScores {
        rouge_1: rouge(candidate, reference, RougeKind::N(1))?,
        rouge_2: rouge(candidate, reference, RougeKind::N(2))?,
        rouge_l: rouge(candidate, reference, RougeKind::L)?,
        bleu: bleu(&[candidate], &[reference], 4)?,
    })
}

/// Semantic similarity between an explanation and a reference text, in [0, 1].
///
/// Contextual-embedding scorers plug in here; the crate ships only the
/// term-frequency cosine stand-in.
pub trait SemanticScorer: Send + Sync {
    fn scorer_id(&self) -> &str;
    fn score(&self, candidate: &str, reference: &str) -> Result<f64, MetricsError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TfCosineScorer;

impl SemanticScorer for TfCosineScorer {
    fn scorer_id(&self) -> &str {
        "tf-cosine"
    }

    fn score(&self, candidate: &str, reference: &str) -> Result<f64, MetricsError> {
        let a = TermVector::from_text(candidate);
        let b = TermVector::from_text(reference);
        if a.is_empty() || b.is_empty() {
            return Err(MetricsError::EmptyText);
        }
        if a == b {
            return Ok(1.0);
        }
        Ok(a.cosine(&b))
    }
}

pub fn semantic_score(
    scorer: &dyn SemanticScorer,
    candidate: &str,
    reference: &str,
) -> Result<f64, MetricsError> {
    scorer.score(candidate, reference)
}
