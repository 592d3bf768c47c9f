//! Checkpoints: one JSON document holding the config echo, the vocabulary
//! in id order, and every named tensor with its shape and row-major data.
//! Keys are sorted maps, so saving the same model twice produces identical
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fusion::{AttentionParams, GateParams};
use crate::model::{FusionMode, ModelError, ModelParams, Vocab};
use crate::moe::{ExpertParams, MoeConfig, MoeParams};
use crate::tensor::Tensor;

const FORMAT: &str = "medvqa-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct TensorBlob {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    dim: usize,
    fusion: FusionMode,
    moe: MoeConfig,
    vocab: Vec<String>,
    tensors: BTreeMap<String, TensorBlob>,
}

fn bad(path: &Path, message: impl Into<String>) -> ModelError {
    ModelError::BadCheckpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Write a checkpoint. The fusion mode records what the parameters were
/// trained as; loading restores it alongside the model.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    vocab: &Vocab,
    fusion: FusionMode,
) -> Result<(), ModelError> {
    if vocab.len() != params.vocab_size {
        return Err(bad(
            path,
            format!(
                "vocab has {} tokens but the model was built for {}",
                vocab.len(),
                params.vocab_size
            ),
        ));
    }
    let tensors: BTreeMap<String, TensorBlob> = params
        .named()
        .into_iter()
        .map(|(name, t)| {
            (
                name,
                TensorBlob {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            )
        })
        .collect();
    let doc = CheckpointDoc {
        format: FORMAT.to_string(),
        dim: params.dim,
        fusion,
        moe: params.moe_cfg,
        vocab: vocab.tokens().to_vec(),
        tensors,
    };
    let text =
        serde_json::to_string_pretty(&doc).map_err(|e| bad(path, format!("serialize: {e}")))?;
    std::fs::write(path, text).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn take_tensor(
    path: &Path,
    tensors: &mut BTreeMap<String, TensorBlob>,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<Tensor, ModelError> {
    let blob = tensors
        .remove(name)
        .ok_or_else(|| bad(path, format!("missing tensor '{name}'")))?;
    if blob.shape != [rows, cols] {
        return Err(bad(
            path,
            format!(
                "tensor '{name}' has shape {:?}, expected [{rows}, {cols}]",
                blob.shape
            ),
        ));
    }
    Ok(Tensor::new(blob.shape, blob.data)
        .map_err(|e| bad(path, format!("tensor '{name}': {e}")))?
        .with_grad())
}

/// Load a checkpoint saved by [`save_checkpoint`]. Every expected tensor
/// must be present with its exact shape; unknown tensors are rejected.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Vocab, FusionMode), ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let doc: CheckpointDoc =
        serde_json::from_str(&text).map_err(|e| bad(path, format!("parse: {e}")))?;
    if doc.format != FORMAT {
        return Err(bad(
            path,
            format!("unsupported format '{}', expected '{FORMAT}'", doc.format),
        ));
    }
    doc.moe.validate()?;
    let vocab = Vocab::from_tokens(doc.vocab)?;
    let v = vocab.len();
    let d = doc.dim;
    if d == 0 {
        return Err(bad(path, "dimension must be positive"));
    }

    let mut tensors = doc.tensors;
    let embed = take_tensor(path, &mut tensors, "embed", v, d)?;
    let prev_embed = take_tensor(path, &mut tensors, "prev_embed", v, d)?;
    let attention = AttentionParams {
        wq: take_tensor(path, &mut tensors, "attn.wq", d, d)?,
        wk: take_tensor(path, &mut tensors, "attn.wk", d, d)?,
        wv: take_tensor(path, &mut tensors, "attn.wv", d, d)?,
    };
    let gate = GateParams {
        wl: take_tensor(path, &mut tensors, "gate.wl", d, d)?,
        wv: take_tensor(path, &mut tensors, "gate.wv", d, d)?,
    };
    let gating = take_tensor(path, &mut tensors, "moe.gating", 2 * d, doc.moe.num_experts)?;
    let mut experts = Vec::with_capacity(doc.moe.num_experts);
    for i in 0..doc.moe.num_experts {
        experts.push(ExpertParams {
            w1: take_tensor(
                path,
                &mut tensors,
                &format!("moe.expert{i}.w1"),
                2 * d,
                doc.moe.expert_hidden,
            )?,
            w2: take_tensor(
                path,
                &mut tensors,
                &format!("moe.expert{i}.w2"),
                doc.moe.expert_hidden,
                d,
            )?,
        });
    }
    let readout = take_tensor(path, &mut tensors, "readout", d, v)?;
    if let Some(stray) = tensors.keys().next() {
        return Err(bad(path, format!("unexpected tensor '{stray}'")));
    }

    let params = ModelParams {
        dim: d,
        vocab_size: v,
        moe_cfg: doc.moe,
        embed,
        prev_embed,
        attention,
        gate,
        moe: MoeParams { gating, experts },
        readout,
    };
    Ok((params, vocab, doc.fusion))
}
