//! Answer and rationale quality metrics: exact-match accuracy for closed
//! questions, ROUGE-L F1 on the longest common subsequence, and BLEU-4 with
//! add-one smoothing on the higher n-gram orders.
//!
//! Tokenization is whitespace splitting with no case folding. Closed-answer
//! comparison normalizes first: lowercase, trim, collapse internal
//! whitespace.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("reference text has no tokens")]
    EmptyReference,
    #[error("got {predictions} predictions but {golds} gold answers")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("need at least one prediction")]
    EmptyInput,
    #[error("bleu n-gram order must be at least 1")]
    ZeroOrder,
}

/// Lowercase, trim, and collapse runs of whitespace to single spaces.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Closed-question match after normalization on both sides.
pub fn answer_matches(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

/// Fraction of predictions matching their gold answer after normalization.
/// The lists must be parallel, same length, and non-empty.
pub fn accuracy_closed<P: AsRef<str>, G: AsRef<str>>(
    predictions: &[P],
    golds: &[G],
) -> Result<f64, MetricError> {
    if predictions.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| answer_matches(p.as_ref(), g.as_ref()))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            curr[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(curr[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE-L F1: precision and recall of the longest common subsequence.
///
/// An empty reference is an error; an empty candidate scores 0; F1 is 0
/// when precision and recall are both 0.
pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64, MetricError> {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let rf: Vec<&str> = reference.split_whitespace().collect();
    if rf.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if cand.is_empty() {
        return Ok(0.0);
    }
    let l = lcs_len(&cand, &rf) as f64;
    let p = l / cand.len() as f64;
    let r = l / rf.len() as f64;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * r / (p + r))
}

fn ngram_counts<'t>(tokens: &'t [&'t str], n: usize) -> HashMap<&'t [&'t str], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// BLEU against a single reference, up to n-grams of order `max_n`.
///
/// Modified n-gram precisions are clipped by reference counts. The unigram
/// precision is unsmoothed, so zero unigram overlap scores 0; higher orders
/// use add-one smoothing `(clipped + 1) / (total + 1)`; orders longer than
/// the candidate count as precision 1. Brevity penalty is
/// `exp(min(0, 1 - |ref| / |cand|))` and the precisions combine by
/// geometric mean.
pub fn bleu_n(candidate: &str, reference: &str, max_n: usize) -> Result<f64, MetricError> {
    if max_n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let rf: Vec<&str> = reference.split_whitespace().collect();
    if rf.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut product = 1.0f64;
    for n in 1..=max_n {
        if cand.len() < n {
            continue;
        }
        let total = cand.len() - n + 1;
        let cc = ngram_counts(&cand, n);
        let rc = ngram_counts(&rf, n);
        let clipped: usize = cc
            .iter()
            .map(|(gram, count)| (*count).min(rc.get(gram).copied().unwrap_or(0)))
            .sum();
        product *= if n == 1 {
            clipped as f64 / total as f64
        } else {
            (clipped as f64 + 1.0) / (total as f64 + 1.0)
        };
    }
    let bp = (1.0 - rf.len() as f64 / cand.len() as f64).min(0.0).exp();
    Ok(bp * product.powf(1.0 / max_n as f64))
}

/// BLEU-4, the reporting default.
pub fn bleu(candidate: &str, reference: &str) -> Result<f64, MetricError> {
    bleu_n(candidate, reference, 4)
}
