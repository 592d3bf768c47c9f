//! Sparse top-k mixture of experts over fused text and attended visual
//! rows, plus the routing log that records which experts fired.
//!
//! Per row: gating scores come from `[Ft | H] Wg`, the top-k experts by
//! score are selected (ties prefer the lower index), mixture weights are a
//! softmax over the selected scores only, and the mixture output drives an
//! elementwise sigmoid gate that blends text and attended features. Only
//! selected experts enter the graph for a row, so unselected experts get
//! exact-zero gradients and cannot influence the forward value.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{gated_fuse, FusionError};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

/// Errors raised by mixture construction and routing-log io.
#[derive(Debug, Error)]
pub enum MoeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("mixture needs at least one expert")]
    NoExperts,
    #[error("top_k must be in 1..={experts}, got {top_k}")]
    BadTopK { top_k: usize, experts: usize },
    #[error("expert hidden width must be at least 1")]
    ZeroHidden,
    #[error("auxiliary load balancing is reserved and must stay disabled")]
    LoadBalanceUnsupported,
    #[error("gating matrix must be {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    BadGating {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("expert {index}: weights must be {in_dim}x{hidden} and {hidden}x{out_dim}")]
    BadExpert {
        index: usize,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    },
    #[error("non-finite gating score")]
    NonFiniteScore,
    #[error("routing log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("routing log {path} line {line}: {source}")]
    ParseAt {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("routing log serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Shape and routing configuration of the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    /// Reserved. Auxiliary load balancing is not implemented; enabling it
    /// is a validation error rather than a silent no-op.
    #[serde(default)]
    pub load_balance: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            num_experts: 6,
            top_k: 2,
            expert_hidden: 16,
            load_balance: false,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<(), MoeError> {
        if self.num_experts == 0 {
            return Err(MoeError::NoExperts);
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(MoeError::BadTopK {
                top_k: self.top_k,
                experts: self.num_experts,
            });
        }
        if self.expert_hidden == 0 {
            return Err(MoeError::ZeroHidden);
        }
        if self.load_balance {
            return Err(MoeError::LoadBalanceUnsupported);
        }
        Ok(())
    }
}

/// One expert: a two-layer feed-forward block `2d -> hidden -> d` with a
/// relu in between.
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Gating matrix plus all expert blocks.
#[derive(Debug, Clone)]
pub struct MoeParams {
    pub gating: Tensor,
    pub experts: Vec<ExpertParams>,
}

fn init_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data)
        .expect("init length matches shape")
        .with_grad()
}

impl MoeParams {
    /// Uniform init scaled by fan-in; draw order is the gating matrix, then
    /// each expert's w1 and w2 in expert order.
    pub fn init(dim: usize, cfg: &MoeConfig, rng: &mut impl Rng) -> Result<Self, MoeError> {
        cfg.validate()?;
        let gating = init_uniform(2 * dim, cfg.num_experts, rng);
        let experts = (0..cfg.num_experts)
            .map(|_| ExpertParams {
                w1: init_uniform(2 * dim, cfg.expert_hidden, rng),
                w2: init_uniform(cfg.expert_hidden, dim, rng),
            })
            .collect();
        Ok(MoeParams { gating, experts })
    }

    /// Mount every parameter as a named graph leaf
    /// (`moe.gating`, `moe.expert{i}.w1`, `moe.expert{i}.w2`).
    pub fn mount(&self, g: &mut Graph) -> Result<MoeNodes, TensorError> {
        let gating = g.leaf("moe.gating", &self.gating)?;
        let mut experts = Vec::with_capacity(self.experts.len());
        for (i, e) in self.experts.iter().enumerate() {
            let w1 = g.leaf(&format!("moe.expert{i}.w1"), &e.w1)?;
            let w2 = g.leaf(&format!("moe.expert{i}.w2"), &e.w2)?;
            experts.push((w1, w2));
        }
        Ok(MoeNodes { gating, experts })
    }
}

/// Graph handles to mounted mixture parameters.
#[derive(Debug, Clone)]
pub struct MoeNodes {
    pub gating: NodeId,
    pub experts: Vec<(NodeId, NodeId)>,
}

/// Experts chosen for one row, highest score first, with their softmax
/// mixture weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingChoice {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Indices of the k largest scores, ordered by descending score with ties
/// broken toward the lower index.
pub fn top_k_select(scores: &[f64], k: usize) -> Result<Vec<usize>, MoeError> {
    if k == 0 || k > scores.len() {
        return Err(MoeError::BadTopK {
            top_k: k,
            experts: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MoeError::NonFiniteScore);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores checked non-NaN")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

fn check_nodes(g: &Graph, nodes: &MoeNodes, dim: usize, top_k: usize) -> Result<usize, MoeError> {
    let num_experts = nodes.experts.len();
    if num_experts == 0 {
        return Err(MoeError::NoExperts);
    }
    if top_k == 0 || top_k > num_experts {
        return Err(MoeError::BadTopK {
            top_k,
            experts: num_experts,
        });
    }
    let gt = g.value(nodes.gating);
    if gt.shape() != [2 * dim, num_experts] {
        return Err(MoeError::BadGating {
            expected_rows: 2 * dim,
            expected_cols: num_experts,
            rows: gt.rows(),
            cols: gt.cols(),
        });
    }
    let hidden = g.value(nodes.experts[0].0).cols();
    if hidden == 0 {
        return Err(MoeError::ZeroHidden);
    }
    for (i, &(w1, w2)) in nodes.experts.iter().enumerate() {
        if g.value(w1).shape() != [2 * dim, hidden] || g.value(w2).shape() != [hidden, dim] {
            return Err(MoeError::BadExpert {
                index: i,
                in_dim: 2 * dim,
                hidden,
                out_dim: dim,
            });
        }
    }
    Ok(num_experts)
}

/// Raw mixture output `E` (one row per input row) and the per-row routing.
///
/// Only the selected experts of each row are wired into the graph, which is
/// what makes unselected experts exactly inert for both values and
/// gradients.
pub fn moe_mixture(
    g: &mut Graph,
    ft: NodeId,
    h_att: NodeId,
    nodes: &MoeNodes,
    top_k: usize,
) -> Result<(NodeId, Vec<RoutingChoice>), MoeError> {
    let (n, d) = g.value(ft).dims2("moe_mixture")?;
    let ht = g.value(h_att);
    if ht.shape() != [n, d] {
        return Err(MoeError::Tensor(TensorError::ShapeMismatch {
            op: "moe_mixture",
            lhs: vec![n, d],
            rhs: ht.shape().to_vec(),
        }));
    }
    let num_experts = check_nodes(g, nodes, d, top_k)?;

    let x = g.concat_cols(ft, h_att)?;
    let scores = g.matmul(x, nodes.gating)?;

    let mut routing = Vec::with_capacity(n);
    let mut out_rows = Vec::with_capacity(n);
    for i in 0..n {
        let row_scores = g.value(scores).data()[i * num_experts..(i + 1) * num_experts].to_vec();
        if row_scores.iter().any(|s| !s.is_finite()) {
            return Err(MoeError::NonFiniteScore);
        }
        let selected = top_k_select(&row_scores, top_k)?;

        let score_row = g.row(scores, i)?;
        let picked = g.gather_cols(score_row, &selected)?;
        let weights = g.softmax_rows(picked)?;
        let x_row = g.row(x, i)?;

        let mut mixed: Option<NodeId> = None;
        for (j, &expert_idx) in selected.iter().enumerate() {
            let (w1, w2) = nodes.experts[expert_idx];
            let hidden = g.matmul(x_row, w1)?;
            let act = g.relu(hidden)?;
            let expert_out = g.matmul(act, w2)?;
            let wj = g.entry(weights, 0, j)?;
            let scaled = g.scale_by(expert_out, wj)?;
            mixed = Some(match mixed {
                Some(acc) => g.add(acc, scaled)?,
                None => scaled,
            });
        }
        out_rows.push(mixed.expect("top_k is at least 1"));
        routing.push(RoutingChoice {
            experts: selected,
            weights: g.value(weights).data().to_vec(),
        });
    }

    let e = g.stack_rows(&out_rows)?;
    Ok((e, routing))
}

/// Full fusion: mixture output drives `lambda = sigmoid(E)` and the fused
/// features are `(1 - lambda) . Ft + lambda . H`.
pub fn moe_fuse(
    g: &mut Graph,
    ft: NodeId,
    h_att: NodeId,
    nodes: &MoeNodes,
    top_k: usize,
) -> Result<(NodeId, Vec<RoutingChoice>), MoeError> {
    let (e, routing) = moe_mixture(g, ft, h_att, nodes, top_k)?;
    let lambda = g.sigmoid(e)?;
    let fused = gated_fuse(g, ft, h_att, lambda)?;
    Ok((fused, routing))
}

/// One routing log line: which experts one row of one item used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub item_id: String,
    pub row: usize,
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
    pub category: String,
}

/// Append-only collection of routing records with JSONL persistence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingLog {
    records: Vec<RoutingRecord>,
}

impl RoutingLog {
    pub fn new() -> Self {
        RoutingLog::default()
    }

    /// Record every row of one item, in row order.
    pub fn push_item(&mut self, item_id: &str, category: &str, choices: &[RoutingChoice]) {
        for (row, choice) in choices.iter().enumerate() {
            self.records.push(RoutingRecord {
                item_id: item_id.to_string(),
                row,
                experts: choice.experts.clone(),
                weights: choice.weights.clone(),
                category: category.to_string(),
            });
        }
    }

    pub fn records(&self) -> &[RoutingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), MoeError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        for record in &self.records {
            serde_json::to_writer(&mut w, record)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, MoeError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line).map_err(|source| MoeError::ParseAt {
                path: path.display().to_string(),
                line: idx + 1,
                source,
            })?;
            records.push(record);
        }
        Ok(RoutingLog { records })
    }
}
