//! The locally trained diagnostic model: token-embedding text encoder,
//! file-loaded visual features, cross-attention, a fusion stage (sparse
//! mixture-of-experts or a dense sigmoid gate), and a minimal
//! autoregressive decoder, trained with plain SGD on summed-token NLL.

mod checkpoint;
mod forward;
mod train;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    assemble_context, batch_loss_graph, build_vocab, encode_text, forward, greedy_decode, loss_nll,
    prepare_examples, Example,
};
pub use train::{train, TrainReport};
pub use vocab::Vocab;

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureError;
use crate::fusion::{AttentionParams, FusionError, GateParams};
use crate::moe::{MoeConfig, MoeError, MoeNodes, MoeParams};
use crate::tensor::{Gradients, Graph, NamedTensors, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("unknown token '{token}'")]
    UnknownToken { token: String },
    #[error("model config: {0}")]
    BadConfig(String),
    #[error("image features have {found} column(s), model dimension is {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("feature matrix for item '{item_id}' has no rows")]
    EmptyFeatures { item_id: String },
    #[error("{steps} logit row(s) for {targets} target token(s)")]
    LengthMismatch { steps: usize, targets: usize },
    #[error("target token sequence is empty")]
    EmptyTarget,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<ModelError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {message}")]
    BadCheckpoint { path: String, message: String },
}

/// Which fusion stage combines text features with attended visual features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Moe,
    Gate,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Moe => "moe",
            FusionMode::Gate => "gate",
        })
    }
}

impl FromStr for FusionMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "moe" => Ok(FusionMode::Moe),
            "gate" => Ok(FusionMode::Gate),
            other => Err(ModelError::BadConfig(format!(
                "unknown fusion mode '{other}' (expected moe or gate)"
            ))),
        }
    }
}

/// Training hyperparameters. Defaults are the recorded reference settings;
/// desk-scale runs typically override epochs and learning rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fusion: FusionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 8e-5,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            fusion: FusionMode::Moe,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is allowed: it is the documented way to express
    /// "evaluate the update loop without moving parameters".
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(ModelError::BadConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::BadConfig(
                "batch size must be at least 1".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(ModelError::BadConfig("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Every trainable tensor, addressable by a stable name. Both fusion
/// variants' parameters are always present so checkpoints and gradient
/// checks cover either mode.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dim: usize,
    pub vocab_size: usize,
    pub moe_cfg: MoeConfig,
    pub embed: Tensor,
    pub prev_embed: Tensor,
    pub attention: AttentionParams,
    pub gate: GateParams,
    pub moe: MoeParams,
    pub readout: Tensor,
}

/// Graph leaves for one mounted parameter set.
pub struct MountedParams {
    pub embed: NodeId,
    pub prev_embed: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub gate_wl: NodeId,
    pub gate_wv: NodeId,
    pub moe: MoeNodes,
    pub readout: NodeId,
}

fn init_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data)
        .expect("init length matches shape")
        .with_grad()
}

impl ModelParams {
    /// Random init. Draw order is embed, prev_embed, attention, gate,
    /// mixture, readout — pinned so a seed fully determines the model.
    pub fn init(
        vocab_size: usize,
        dim: usize,
        moe_cfg: &MoeConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        if vocab_size == 0 || dim == 0 {
            return Err(ModelError::BadConfig(
                "vocab size and dimension must be positive".into(),
            ));
        }
        moe_cfg.validate()?;
        Ok(ModelParams {
            dim,
            vocab_size,
            moe_cfg: *moe_cfg,
            embed: init_matrix(vocab_size, dim, rng),
            prev_embed: init_matrix(vocab_size, dim, rng),
            attention: AttentionParams::init(dim, rng),
            gate: GateParams::init(dim, rng),
            moe: MoeParams::init(dim, moe_cfg, rng)?,
            readout: init_matrix(dim, vocab_size, rng),
        })
    }

    /// All-zero parameters (used to pin degenerate-output behavior).
    pub fn zeros(vocab_size: usize, dim: usize, moe_cfg: &MoeConfig) -> Result<Self, ModelError> {
        moe_cfg.validate()?;
        let z = |r: usize, c: usize| Tensor::zeros(r, c).with_grad();
        Ok(ModelParams {
            dim,
            vocab_size,
            moe_cfg: *moe_cfg,
            embed: z(vocab_size, dim),
            prev_embed: z(vocab_size, dim),
            attention: AttentionParams {
                wq: z(dim, dim),
                wk: z(dim, dim),
                wv: z(dim, dim),
            },
            gate: GateParams {
                wl: z(dim, dim),
                wv: z(dim, dim),
            },
            moe: MoeParams {
                gating: z(2 * dim, moe_cfg.num_experts),
                experts: (0..moe_cfg.num_experts)
                    .map(|_| crate::moe::ExpertParams {
                        w1: z(2 * dim, moe_cfg.expert_hidden),
                        w2: z(moe_cfg.expert_hidden, dim),
                    })
                    .collect(),
            },
            readout: z(dim, vocab_size),
        })
    }

    /// Mount every tensor as a named leaf.
    pub fn mount(&self, g: &mut Graph) -> Result<MountedParams, ModelError> {
        Ok(MountedParams {
            embed: g.leaf("embed", &self.embed)?,
            prev_embed: g.leaf("prev_embed", &self.prev_embed)?,
            wq: g.leaf("attn.wq", &self.attention.wq)?,
            wk: g.leaf("attn.wk", &self.attention.wk)?,
            wv: g.leaf("attn.wv", &self.attention.wv)?,
            gate_wl: g.leaf("gate.wl", &self.gate.wl)?,
            gate_wv: g.leaf("gate.wv", &self.gate.wv)?,
            moe: self.moe.mount(g)?,
            readout: g.leaf("readout", &self.readout)?,
        })
    }

    /// Snapshot of every tensor keyed by its leaf name.
    pub fn named(&self) -> NamedTensors {
        let mut map = NamedTensors::new();
        map.insert("embed".into(), self.embed.clone());
        map.insert("prev_embed".into(), self.prev_embed.clone());
        map.insert("attn.wq".into(), self.attention.wq.clone());
        map.insert("attn.wk".into(), self.attention.wk.clone());
        map.insert("attn.wv".into(), self.attention.wv.clone());
        map.insert("gate.wl".into(), self.gate.wl.clone());
        map.insert("gate.wv".into(), self.gate.wv.clone());
        map.insert("moe.gating".into(), self.moe.gating.clone());
        for (i, e) in self.moe.experts.iter().enumerate() {
            map.insert(format!("moe.expert{i}.w1"), e.w1.clone());
            map.insert(format!("moe.expert{i}.w2"), e.w2.clone());
        }
        map.insert("readout".into(), self.readout.clone());
        map
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "embed" => return Some(&mut self.embed),
            "prev_embed" => return Some(&mut self.prev_embed),
            "attn.wq" => return Some(&mut self.attention.wq),
            "attn.wk" => return Some(&mut self.attention.wk),
            "attn.wv" => return Some(&mut self.attention.wv),
            "gate.wl" => return Some(&mut self.gate.wl),
            "gate.wv" => return Some(&mut self.gate.wv),
            "moe.gating" => return Some(&mut self.moe.gating),
            "readout" => return Some(&mut self.readout),
            _ => {}
        }
        let rest = name.strip_prefix("moe.expert")?;
        let (idx, field) = rest.split_once('.')?;
        let idx: usize = idx.parse().ok()?;
        let expert = self.moe.experts.get_mut(idx)?;
        match field {
            "w1" => Some(&mut expert.w1),
            "w2" => Some(&mut expert.w2),
            _ => None,
        }
    }

    /// Copy of this parameter set with the named tensors replaced —
    /// used to rebuild graphs from perturbed values in gradient checks.
    pub fn with_tensors(&self, named: &NamedTensors) -> Result<ModelParams, ModelError> {
        let mut out = self.clone();
        for (name, tensor) in named {
            let slot = out
                .tensor_mut(name)
                .ok_or_else(|| ModelError::BadConfig(format!("no parameter named '{name}'")))?;
            if slot.shape() != tensor.shape() {
                return Err(ModelError::BadConfig(format!(
                    "parameter '{name}' has shape {:?}, replacement has {:?}",
                    slot.shape(),
                    tensor.shape()
                )));
            }
            *slot = tensor.clone().with_grad();
        }
        Ok(out)
    }

    /// One SGD step: `w -= lr * grad` for every reported gradient. A zero
    /// learning rate leaves every bit untouched.
    pub fn apply_gradients(&mut self, grads: &Gradients, learning_rate: f64) {
        if learning_rate == 0.0 {
            return;
        }
        for (name, grad) in grads.iter() {
            let Some(tensor) = self.tensor_mut(name) else {
                continue;
            };
            debug_assert_eq!(tensor.shape(), grad.shape(), "gradient shape for {name}");
            for (w, g) in tensor.data_mut().iter_mut().zip(grad.data()) {
                *w -= learning_rate * g;
            }
        }
    }
}
