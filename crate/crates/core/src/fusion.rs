//! Cross-attention from text tokens onto visual patches, and the gated
//! fusion that blends the attended visual context back into the text
//! features.
//!
//! All builders append onto a caller-supplied [`Graph`] so gradients flow
//! through them during training; `*_value` helpers run the same math on an
//! ephemeral graph for callers that only need numbers.

use rand::Rng;

use crate::tensor::{FeatureMatrix, Graph, NodeId, Tensor, TensorError};
use thiserror::Error;

/// Errors raised by the fusion layer.
#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("feature dimension mismatch: text {text} vs visual {visual}")]
    DimMismatch { text: usize, visual: usize },
    #[error("{name} projection must be {expected}x{expected}, got {rows}x{cols}")]
    BadProjection {
        name: &'static str,
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("gate value {value} at row {row}, col {col} is outside [0, 1]")]
    GateOutOfRange { row: usize, col: usize, value: f64 },
    #[error("feature dimension must be positive")]
    ZeroDim,
}

/// Bias-free single-head attention projections, all `d x d`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

fn init_square(dim: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (dim as f64).sqrt();
    let data = (0..dim * dim)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::matrix(dim, dim, data)
        .expect("square init has matching length")
        .with_grad()
}

impl AttentionParams {
    /// Uniform init in `[-1/sqrt(d), 1/sqrt(d)]`; draw order is wq, wk, wv.
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        AttentionParams {
            wq: init_square(dim, rng),
            wk: init_square(dim, rng),
            wv: init_square(dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }
}

/// Parameters of the dense sigmoid gate baseline, both `d x d`.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub wl: Tensor,
    pub wv: Tensor,
}

impl GateParams {
    /// Uniform init in `[-1/sqrt(d), 1/sqrt(d)]`; draw order is wl, wv.
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        GateParams {
            wl: init_square(dim, rng),
            wv: init_square(dim, rng),
        }
    }
}

fn check_square(
    g: &Graph,
    w: NodeId,
    name: &'static str,
    expected: usize,
) -> Result<(), FusionError> {
    let t = g.value(w);
    if t.shape() != [expected, expected] {
        return Err(FusionError::BadProjection {
            name,
            expected,
            rows: t.rows(),
            cols: t.cols(),
        });
    }
    Ok(())
}

/// Scaled dot-product attention of text rows over visual rows:
/// `H = softmax((Ft Wq)(Fi Wk)^T / sqrt(d)) (Fi Wv)`.
///
/// Output has one row per text row; every output row is a convex
/// combination of projected visual rows.
pub fn cross_attention(
    g: &mut Graph,
    ft: NodeId,
    fi: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
) -> Result<NodeId, FusionError> {
    let d = g.value(ft).dims2("cross_attention")?.1;
    let dv = g.value(fi).dims2("cross_attention")?.1;
    if d != dv {
        return Err(FusionError::DimMismatch {
            text: d,
            visual: dv,
        });
    }
    if d == 0 {
        return Err(FusionError::ZeroDim);
    }
    check_square(g, wq, "query", d)?;
    check_square(g, wk, "key", d)?;
    check_square(g, wv, "value", d)?;

    let q = g.matmul(ft, wq)?;
    let k = g.matmul(fi, wk)?;
    let v = g.matmul(fi, wv)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax_rows(scaled)?;
    Ok(g.matmul(attn, v)?)
}

/// [`cross_attention`] on an ephemeral graph, returning plain values.
pub fn cross_attention_value(
    ft: &FeatureMatrix,
    fi: &FeatureMatrix,
    params: &AttentionParams,
) -> Result<FeatureMatrix, FusionError> {
    let mut g = Graph::new();
    let ftn = g.constant(ft);
    let fin = g.constant(fi);
    let wq = g.constant(&params.wq);
    let wk = g.constant(&params.wk);
    let wv = g.constant(&params.wv);
    let h = cross_attention(&mut g, ftn, fin, wq, wk, wv)?;
    Ok(g.value(h).clone())
}

/// Dense gate baseline: `lambda = sigmoid([Ft | H] [Wl ; Wv])`, one gate
/// value per feature entry.
pub fn baseline_gate(
    g: &mut Graph,
    ft: NodeId,
    h: NodeId,
    wl: NodeId,
    wv: NodeId,
) -> Result<NodeId, FusionError> {
    let (rf, d) = g.value(ft).dims2("baseline_gate")?;
    let (rh, dh) = g.value(h).dims2("baseline_gate")?;
    if rf != rh || d != dh {
        return Err(FusionError::Tensor(TensorError::ShapeMismatch {
            op: "baseline_gate",
            lhs: vec![rf, d],
            rhs: vec![rh, dh],
        }));
    }
    check_square(g, wl, "gate text", d)?;
    check_square(g, wv, "gate visual", d)?;
    let x = g.concat_cols(ft, h)?;
    let w = g.concat_rows(wl, wv)?;
    let z = g.matmul(x, w)?;
    Ok(g.sigmoid(z)?)
}

/// Convex blend `F = (1 - lambda) . Ft + lambda . H` with an elementwise
/// gate. Gate entries must already lie in `[0, 1]`.
pub fn gated_fuse(
    g: &mut Graph,
    ft: NodeId,
    h: NodeId,
    lambda: NodeId,
) -> Result<NodeId, FusionError> {
    let (r, c) = g.value(ft).dims2("gated_fuse")?;
    for other in [h, lambda] {
        let t = g.value(other);
        if t.shape() != [r, c] {
            return Err(FusionError::Tensor(TensorError::ShapeMismatch {
                op: "gated_fuse",
                lhs: vec![r, c],
                rhs: t.shape().to_vec(),
            }));
        }
    }
    let lt = g.value(lambda);
    for row in 0..r {
        for col in 0..c {
            let value = lt.get(row, col);
            if !(0.0..=1.0).contains(&value) {
                return Err(FusionError::GateOutOfRange { row, col, value });
            }
        }
    }
    let ones = g.constant(&Tensor::ones(r, c));
    let one_minus = g.sub(ones, lambda)?;
    let keep = g.mul(one_minus, ft)?;
    let take = g.mul(lambda, h)?;
    Ok(g.add(keep, take)?)
}
