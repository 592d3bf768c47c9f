//! Evaluation reports: exact-match accuracy overall, per category, and for
//! the closed-end subset; ROUGE-L / BLEU means over open-end items; and
//! expert-utilization histograms aggregated from routing logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{bleu, normalize_answer, rouge_l, MetricError};
use crate::model::{greedy_decode, Example, FusionMode, ModelError, ModelParams, Vocab};
use crate::moe::RoutingLog;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty prediction list")]
    Empty,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot build a utilization histogram from an empty routing log")]
    EmptyLog,
    #[error("routing record for item {item_id} has {experts} experts but {weights} weights")]
    MismatchedRecord {
        item_id: String,
        experts: usize,
        weights: usize,
    },
    #[error("routing record for item {item_id} carries a negative or non-finite weight")]
    BadWeight { item_id: String },
    #[error("category {category} has zero total routing mass")]
    ZeroMass { category: String },
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// One model output next to its gold answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    pub category: String,
    pub predicted: String,
    pub gold: String,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Aggregated evaluation results. `overall_accuracy` is exact-match over
/// every item; `closed_accuracy` restricts to items with answer options;
/// the text-overlap means cover the open-end remainder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub total_items: usize,
    pub closed_items: usize,
    pub open_items: usize,
    pub overall_accuracy: f64,
    pub closed_accuracy: Option<f64>,
    pub open_rouge_l: Option<f64>,
    pub open_bleu: Option<f64>,
    pub per_category: BTreeMap<String, CategoryStats>,
    /// Per category: normalized routing weight mass per expert.
    pub expert_utilization: Option<BTreeMap<String, Vec<f64>>>,
}

/// Normalized routing weight mass per expert, keyed by category. The
/// histogram width is one past the highest expert index the log mentions;
/// each category's row sums to 1.
pub fn expert_utilization(log: &RoutingLog) -> Result<BTreeMap<String, Vec<f64>>, EvalError> {
    if log.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let mut width = 0usize;
    for rec in log.records() {
        if rec.experts.len() != rec.weights.len() {
            return Err(EvalError::MismatchedRecord {
                item_id: rec.item_id.clone(),
                experts: rec.experts.len(),
                weights: rec.weights.len(),
            });
        }
        if rec.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(EvalError::BadWeight {
                item_id: rec.item_id.clone(),
            });
        }
        width = width.max(rec.experts.iter().copied().max().map_or(0, |m| m + 1));
    }

    let mut masses: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for rec in log.records() {
        let row = masses
            .entry(rec.category.clone())
            .or_insert_with(|| vec![0.0; width]);
        for (&e, &w) in rec.experts.iter().zip(&rec.weights) {
            row[e] += w;
        }
    }
    for (category, row) in &mut masses {
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(EvalError::ZeroMass {
                category: category.clone(),
            });
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(masses)
}

/// Assemble a report from predictions and an optional routing log. Pure:
/// the same inputs always produce the same report.
pub fn build_report(
    predictions: &[Prediction],
    routing: Option<&RoutingLog>,
) -> Result<EvalReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }

    let mut correct_total = 0usize;
    let mut closed = (0usize, 0usize);
    let mut rouge_sum = 0.0;
    let mut bleu_sum = 0.0;
    let mut open = 0usize;
    let mut per_category: BTreeMap<String, CategoryStats> = BTreeMap::new();

    for p in predictions {
        let hit = normalize_answer(&p.predicted) == normalize_answer(&p.gold);
        correct_total += hit as usize;
        if p.closed {
            closed.0 += 1;
            closed.1 += hit as usize;
        } else {
            open += 1;
            rouge_sum += rouge_l(&p.predicted, &p.gold)?;
            bleu_sum += bleu(&p.predicted, &p.gold)?;
        }
        let stats = per_category
            .entry(p.category.clone())
            .or_insert(CategoryStats {
                count: 0,
                correct: 0,
                accuracy: 0.0,
            });
        stats.count += 1;
        stats.correct += hit as usize;
    }
    for stats in per_category.values_mut() {
        stats.accuracy = stats.correct as f64 / stats.count as f64;
    }

    let expert_utilization = routing
        .filter(|log| !log.is_empty())
        .map(expert_utilization)
        .transpose()?;

    Ok(EvalReport {
        total_items: predictions.len(),
        closed_items: closed.0,
        open_items: open,
        overall_accuracy: correct_total as f64 / predictions.len() as f64,
        closed_accuracy: (closed.0 > 0).then(|| closed.1 as f64 / closed.0 as f64),
        open_rouge_l: (open > 0).then(|| rouge_sum / open as f64),
        open_bleu: (open > 0).then(|| bleu_sum / open as f64),
        per_category,
        expert_utilization,
    })
}

/// Run greedy decoding over every example and pair outputs with golds.
/// Also returns the accumulated routing log (empty in gate mode).
pub fn predict_examples(
    params: &ModelParams,
    fusion: FusionMode,
    examples: &[Example],
    vocab: &Vocab,
    max_len: usize,
) -> Result<(Vec<Prediction>, RoutingLog), ModelError> {
    let mut predictions = Vec::with_capacity(examples.len());
    let mut log = RoutingLog::new();
    for ex in examples {
        let (tokens, routing) = greedy_decode(params, fusion, &ex.context, &ex.features, max_len)?;
        log.push_item(&ex.id, &ex.category, &routing);
        predictions.push(Prediction {
            item_id: ex.id.clone(),
            category: ex.category.clone(),
            predicted: vocab.decode(&tokens),
            gold: ex.gold_answer.clone(),
            closed: ex.closed,
        });
    }
    Ok((predictions, log))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text summary, one metric per line, categories alphabetical.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "items: {} ({} closed, {} open)",
            self.total_items, self.closed_items, self.open_items
        );
        let _ = writeln!(s, "overall accuracy: {:.4}", self.overall_accuracy);
        if let Some(a) = self.closed_accuracy {
            let _ = writeln!(s, "closed-end accuracy: {a:.4}");
        }
        if let Some(r) = self.open_rouge_l {
            let _ = writeln!(s, "open-end rouge-l: {r:.4}");
        }
        if let Some(b) = self.open_bleu {
            let _ = writeln!(s, "open-end bleu: {b:.4}");
        }
        for (cat, stats) in &self.per_category {
            let _ = writeln!(
                s,
                "category {cat}: {}/{} = {:.4}",
                stats.correct, stats.count, stats.accuracy
            );
        }
        if let Some(util) = &self.expert_utilization {
            for (cat, row) in util {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
                let _ = writeln!(s, "experts {cat}: [{}]", cells.join(", "));
            }
        }
        s
    }
}
