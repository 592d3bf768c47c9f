//! Mixture-shape search: one full train + eval per (num_experts, top_k)
//! cell, every cell starting from the same seed so results are comparable.
//! A cell whose configuration is invalid (for instance top_k exceeding the
//! expert count) is marked failed and the search continues.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::Example;
use crate::model::{train, FusionMode, ModelError, ModelParams, TrainConfig, Vocab};
use crate::moe::MoeConfig;
use crate::report::{build_report, predict_examples};

/// For full-scale Med-VQA datasets, top-2 routing with these expert counts
/// is the bundled reference configuration: 6 for VQA-RAD, 10 for SLAKE-EN,
/// 5 for Med-VQA-2019, and 5 for PathVQA.
pub const REFERENCE_EXPERT_COUNTS: [usize; 4] = [6, 10, 5, 5];
pub const REFERENCE_TOP_K: usize = 2;

#[derive(Debug, Clone)]
pub struct GridConfig {
    pub expert_counts: Vec<usize>,
    pub top_ks: Vec<usize>,
    pub expert_hidden: usize,
    /// Per-cell training settings; the fusion mode is forced to the mixture
    /// because the grid axes only exist there.
    pub train: TrainConfig,
    /// Decode cap when evaluating each trained cell.
    pub max_len: usize,
}

/// One grid cell: either an exact-match accuracy or a failure message.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub num_experts: usize,
    pub top_k: usize,
    pub outcome: Result<f64, String>,
}

#[derive(Debug, Clone)]
pub struct GridTable {
    pub cells: Vec<GridCell>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl GridTable {
    /// Machine-readable table. Accuracies are printed in shortest
    /// round-trip form, so parsing the column recovers the exact value.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("num_experts,top_k,status,accuracy,detail\n");
        for cell in &self.cells {
            match &cell.outcome {
                Ok(acc) => {
                    let _ = writeln!(s, "{},{},ok,{},", cell.num_experts, cell.top_k, acc);
                }
                Err(msg) => {
                    let _ = writeln!(
                        s,
                        "{},{},failed,,{}",
                        cell.num_experts,
                        cell.top_k,
                        csv_field(msg)
                    );
                }
            }
        }
        s
    }

    /// Human-readable matrix, expert counts down, top-k across.
    pub fn to_text(&self) -> String {
        let mut experts: Vec<usize> = self.cells.iter().map(|c| c.num_experts).collect();
        experts.dedup();
        let mut ks: Vec<usize> = self.cells.iter().map(|c| c.top_k).collect();
        ks.sort_unstable();
        ks.dedup();

        let mut s = String::from("accuracy by mixture shape\n");
        let _ = write!(s, "{:>8}", "");
        for k in &ks {
            let _ = write!(s, "{:>10}", format!("k={k}"));
        }
        s.push('\n');
        for n in &experts {
            let _ = write!(s, "{:>8}", format!("N={n}"));
            for k in &ks {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| c.num_experts == *n && c.top_k == *k);
                let text = match cell.map(|c| &c.outcome) {
                    Some(Ok(acc)) => format!("{acc:.4}"),
                    Some(Err(_)) => "failed".to_string(),
                    None => "-".to_string(),
                };
                let _ = write!(s, "{text:>10}");
            }
            s.push('\n');
        }
        let failures: Vec<&GridCell> = self.cells.iter().filter(|c| c.outcome.is_err()).collect();
        for cell in failures {
            if let Err(msg) = &cell.outcome {
                let _ = writeln!(s, "N={}, k={}: {msg}", cell.num_experts, cell.top_k);
            }
        }
        s
    }

    pub fn cell(&self, num_experts: usize, top_k: usize) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.num_experts == num_experts && c.top_k == top_k)
    }
}

fn run_cell(
    examples: &[Example],
    vocab: &Vocab,
    dim: usize,
    cfg: &GridConfig,
    num_experts: usize,
    top_k: usize,
) -> Result<f64, String> {
    let moe_cfg = MoeConfig {
        num_experts,
        top_k,
        expert_hidden: cfg.expert_hidden,
        load_balance: false,
    };
    moe_cfg.validate().map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        fusion: FusionMode::Moe,
        ..cfg.train.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut params =
        ModelParams::init(vocab.len(), dim, &moe_cfg, &mut rng).map_err(|e| e.to_string())?;
    train(examples, &mut params, &train_cfg).map_err(|e| e.to_string())?;
    let (predictions, _) = predict_examples(&params, FusionMode::Moe, examples, vocab, cfg.max_len)
        .map_err(|e| e.to_string())?;
    let report = build_report(&predictions, None).map_err(|e| e.to_string())?;
    Ok(report.overall_accuracy)
}

/// Train and evaluate every (num_experts, top_k) combination, row-major
/// over expert counts then top-k values.
pub fn grid_search(
    examples: &[Example],
    vocab: &Vocab,
    dim: usize,
    cfg: &GridConfig,
) -> Result<GridTable, ModelError> {
    if cfg.expert_counts.is_empty() || cfg.top_ks.is_empty() {
        return Err(ModelError::BadConfig(
            "grid needs at least one expert count and one top-k value".into(),
        ));
    }
    cfg.train.validate()?;
    let mut cells = Vec::with_capacity(cfg.expert_counts.len() * cfg.top_ks.len());
    for &n in &cfg.expert_counts {
        for &k in &cfg.top_ks {
            cells.push(GridCell {
                num_experts: n,
                top_k: k,
                outcome: run_cell(examples, vocab, dim, cfg, n, k),
            });
        }
    }
    Ok(GridTable { cells })
}
