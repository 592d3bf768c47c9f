//! Forward computation. The text context for an item is
//! question ⊕ options ⊕ reviewed rationale ⊕ caption (separator tokens in
//! between); its embedded rows attend over the visual feature rows, the
//! fusion stage blends the two, and the mean-pooled fused row conditions a
//! decoder whose step-t logits are `readout(c + prev_embed[y_{t-1}])`.

use std::collections::BTreeMap;

use crate::data::VQAItem;
use crate::features::read_features;
use crate::fusion::{baseline_gate, cross_attention, gated_fuse};
use crate::metrics::normalize_answer;
use crate::model::{FusionMode, ModelError, ModelParams, MountedParams, Vocab};
use crate::moe::{moe_fuse, RoutingChoice};
use crate::orchestrator::RationaleRecord;
use crate::tensor::{Graph, NodeId, Tensor};

/// The text the encoder sees for one item: question, options, the reviewed
/// rationale, and the caption, joined with separator tokens. Sections that
/// do not exist (open-ended items, missing record) are simply absent.
pub fn assemble_context(item: &VQAItem, record: Option<&RationaleRecord>) -> String {
    let mut sections = vec![item.question.clone()];
    if !item.options.is_empty() {
        sections.push(item.options.join(" "));
    }
    if let Some(r) = record {
        if !r.followup_rationale.is_empty() {
            sections.push(r.followup_rationale.clone());
        }
        if !r.caption.is_empty() {
            sections.push(r.caption.clone());
        }
    }
    sections.join(" <sep> ")
}

/// Vocabulary over everything the model must read or emit for a dataset.
pub fn build_vocab(items: &[VQAItem], records: &BTreeMap<String, RationaleRecord>) -> Vocab {
    let mut texts = Vec::with_capacity(items.len() * 3);
    for item in items {
        texts.push(assemble_context(item, records.get(&item.id)));
        texts.push(item.options.join(" "));
        texts.push(item.answer.clone());
    }
    Vocab::build(texts.iter().map(String::as_str))
}

/// One item made trainable: encoded context, encoded target (answer tokens
/// then the end token), and the loaded feature matrix.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub category: String,
    pub context: Vec<usize>,
    pub target: Vec<usize>,
    pub features: Tensor,
    pub gold_answer: String,
    pub closed: bool,
}

/// Load features and tokenize every item. Feature width is checked against
/// the model dimension here so training starts from consistent shapes.
pub fn prepare_examples(
    items: &[VQAItem],
    records: &BTreeMap<String, RationaleRecord>,
    vocab: &Vocab,
    dim: usize,
) -> Result<Vec<Example>, ModelError> {
    items
        .iter()
        .map(|item| {
            let features = read_features(&item.image_features)?;
            if features.cols() != dim {
                return Err(ModelError::DimMismatch {
                    expected: dim,
                    found: features.cols(),
                });
            }
            if features.rows() == 0 {
                return Err(ModelError::EmptyFeatures {
                    item_id: item.id.clone(),
                });
            }
            let context = vocab.encode(&assemble_context(item, records.get(&item.id)))?;
            let mut target = vocab.encode(&item.answer)?;
            target.push(Vocab::END);
            Ok(Example {
                id: item.id.clone(),
                category: item.category.clone(),
                context,
                target,
                features,
                gold_answer: normalize_answer(&item.answer),
                closed: item.is_closed(),
            })
        })
        .collect()
}

/// Toy text encoder: row i of the result is the embedding of token i.
pub fn encode_text(g: &mut Graph, embed: NodeId, tokens: &[usize]) -> Result<NodeId, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::BadConfig(
            "cannot encode an empty token list".into(),
        ));
    }
    Ok(g.gather_rows(embed, tokens)?)
}

/// Shared front half: encode, attend, fuse, pool. Returns the 1×d context
/// vector and (moe mode) the per-row routing.
pub(crate) fn build_context(
    g: &mut Graph,
    mounted: &MountedParams,
    fusion: FusionMode,
    top_k: usize,
    context_tokens: &[usize],
    fi: NodeId,
) -> Result<(NodeId, Vec<RoutingChoice>), ModelError> {
    let ft = encode_text(g, mounted.embed, context_tokens)?;
    let h = cross_attention(g, ft, fi, mounted.wq, mounted.wk, mounted.wv)?;
    let (fused, routing) = match fusion {
        FusionMode::Moe => moe_fuse(g, ft, h, &mounted.moe, top_k)?,
        FusionMode::Gate => {
            let lambda = baseline_gate(g, ft, h, mounted.gate_wl, mounted.gate_wv)?;
            (gated_fuse(g, ft, h, lambda)?, Vec::new())
        }
    };
    Ok((g.mean_rows(fused)?, routing))
}

/// Teacher-forced decoder steps: logits row t is
/// `(c + prev_embed[prev_tokens[t]]) · readout`.
pub(crate) fn teacher_logits(
    g: &mut Graph,
    mounted: &MountedParams,
    context_vec: NodeId,
    prev_tokens: &[usize],
) -> Result<NodeId, ModelError> {
    if prev_tokens.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let prev = g.gather_rows(mounted.prev_embed, prev_tokens)?;
    let ones = g.constant(&Tensor::ones(prev_tokens.len(), 1));
    let c_rows = g.matmul(ones, context_vec)?;
    let z = g.add(c_rows, prev)?;
    Ok(g.matmul(z, mounted.readout)?)
}

/// The previous-token row for teacher forcing: begin, then all but the
/// last target token.
pub(crate) fn teacher_prev(target: &[usize]) -> Result<Vec<usize>, ModelError> {
    if target.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let mut prev = Vec::with_capacity(target.len());
    prev.push(Vocab::BEGIN);
    prev.extend_from_slice(&target[..target.len() - 1]);
    Ok(prev)
}

/// Summed negative log-likelihood of the targets under per-step logits,
/// as a graph node.
pub(crate) fn nll_node(
    g: &mut Graph,
    logits: NodeId,
    targets: &[usize],
) -> Result<NodeId, ModelError> {
    let (steps, _) = g.value(logits).dims2("loss_nll")?;
    if targets.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    if steps != targets.len() {
        return Err(ModelError::LengthMismatch {
            steps,
            targets: targets.len(),
        });
    }
    let log_probs = g.log_softmax_rows(logits)?;
    let mut acc: Option<NodeId> = None;
    for (t, &y) in targets.iter().enumerate() {
        let picked = g.entry(log_probs, t, y)?;
        acc = Some(match acc {
            Some(a) => g.add(a, picked)?,
            None => picked,
        });
    }
    Ok(g.scale(acc.expect("targets checked non-empty"), -1.0)?)
}

/// `L = -Σ_t log p(y_t)` over all target tokens (a sum, not a mean).
pub fn loss_nll(step_logits: &Tensor, targets: &[usize]) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let logits = g.constant(step_logits);
    let loss = nll_node(&mut g, logits, targets)?;
    Ok(g.value(loss).data()[0])
}

/// Full teacher-forced forward pass: one logits row per prev token.
/// `prev_tokens[0]` is normally the begin token.
pub fn forward(
    params: &ModelParams,
    fusion: FusionMode,
    context_tokens: &[usize],
    features: &Tensor,
    prev_tokens: &[usize],
) -> Result<(Tensor, Vec<RoutingChoice>), ModelError> {
    let mut g = Graph::new();
    let mounted = params.mount(&mut g)?;
    let fi = g.constant(features);
    let (c, routing) = build_context(
        &mut g,
        &mounted,
        fusion,
        params.moe_cfg.top_k,
        context_tokens,
        fi,
    )?;
    let logits = teacher_logits(&mut g, &mounted, c, prev_tokens)?;
    Ok((g.value(logits).clone(), routing))
}

/// Build the teacher-forced batch loss on a fresh graph: parameters are
/// mounted once, each `(context, target, features)` item contributes the
/// summed NLL of its target tokens, and the batch loss is their mean.
/// Returns the graph and the scalar loss node, ready for `backward`.
pub fn batch_loss_graph<'a, I>(
    params: &ModelParams,
    fusion: FusionMode,
    batch: I,
) -> Result<(Graph, NodeId), ModelError>
where
    I: IntoIterator<Item = (&'a [usize], &'a [usize], &'a Tensor)>,
{
    let mut g = Graph::new();
    let mounted = params.mount(&mut g)?;
    let mut acc: Option<NodeId> = None;
    let mut count = 0usize;
    for (context, target, features) in batch {
        let fi = g.constant(features);
        let (c, _) = build_context(&mut g, &mounted, fusion, params.moe_cfg.top_k, context, fi)?;
        let prev = teacher_prev(target)?;
        let logits = teacher_logits(&mut g, &mounted, c, &prev)?;
        let item_loss = nll_node(&mut g, logits, target)?;
        acc = Some(match acc {
            Some(a) => g.add(a, item_loss)?,
            None => item_loss,
        });
        count += 1;
    }
    let sum = acc.ok_or(ModelError::EmptyDataset)?;
    let loss = g.scale(sum, 1.0 / count as f64)?;
    Ok((g, loss))
}

fn argmax_ties_low(row: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Greedy autoregressive decode: argmax per step (ties to the lowest id),
/// stopping at the end token or after `max_len` tokens. The end token is
/// not included in the output.
pub fn greedy_decode(
    params: &ModelParams,
    fusion: FusionMode,
    context_tokens: &[usize],
    features: &Tensor,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<RoutingChoice>), ModelError> {
    if max_len == 0 {
        return Err(ModelError::BadConfig("max_len must be at least 1".into()));
    }
    let mut g = Graph::new();
    let mounted = params.mount(&mut g)?;
    let fi = g.constant(features);
    let (c, routing) = build_context(
        &mut g,
        &mounted,
        fusion,
        params.moe_cfg.top_k,
        context_tokens,
        fi,
    )?;
    let mut prev = Vocab::BEGIN;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let prow = g.row(mounted.prev_embed, prev)?;
        let z = g.add(c, prow)?;
        let logits = g.matmul(z, mounted.readout)?;
        let tok = argmax_ties_low(g.value(logits).data());
        if tok == Vocab::END {
            break;
        }
        out.push(tok);
        prev = tok;
    }
    Ok((out, routing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::MoeConfig;
    use crate::tensor::{grad_check, NamedTensors, TensorError};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn cfg(n: usize, k: usize) -> MoeConfig {
        MoeConfig {
            num_experts: n,
            top_k: k,
            expert_hidden: 6,
            load_balance: false,
        }
    }

    fn features(rows: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dim)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        Tensor::matrix(rows, dim, data).unwrap()
    }

    fn item(id: &str, question: &str, answer: &str) -> VQAItem {
        VQAItem {
            id: id.into(),
            question: question.into(),
            options: vec!["yes".into(), "no".into()],
            answer: answer.into(),
            image_features: PathBuf::from("unused.txt"),
            category: "c".into(),
        }
    }

    #[test]
    fn context_assembly_joins_present_sections_with_separators() {
        let it = item("a", "Is there a mass?", "yes");
        assert_eq!(assemble_context(&it, None), "Is there a mass? <sep> yes no");

        let mut rec = RationaleRecord::fresh("a");
        rec.followup_rationale = "look closely".into();
        rec.caption = "a chest scan".into();
        assert_eq!(
            assemble_context(&it, Some(&rec)),
            "Is there a mass? <sep> yes no <sep> look closely <sep> a chest scan"
        );

        let mut open = it.clone();
        open.options.clear();
        assert_eq!(assemble_context(&open, None), "Is there a mass?");
    }

    #[test]
    fn encode_text_is_a_row_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ModelParams::init(6, 4, &cfg(2, 1), &mut rng).unwrap();
        let mut g = Graph::new();
        let m = p.mount(&mut g).unwrap();

        let single = encode_text(&mut g, m.embed, &[5]).unwrap();
        assert_eq!(g.value(single).shape(), [1, 4]);
        assert_eq!(g.value(single).data(), &p.embed.data()[5 * 4..6 * 4]);

        let repeated = encode_text(&mut g, m.embed, &[2, 2]).unwrap();
        let d = g.value(repeated).data();
        assert_eq!(&d[..4], &d[4..]);

        let fwd = encode_text(&mut g, m.embed, &[1, 3]).unwrap();
        let rev = encode_text(&mut g, m.embed, &[3, 1]).unwrap();
        let f = g.value(fwd).data();
        let r = g.value(rev).data();
        assert_eq!(&f[..4], &r[4..]);
        assert_eq!(&f[4..], &r[..4]);

        assert!(matches!(
            encode_text(&mut g, m.embed, &[6]),
            Err(ModelError::Tensor(TensorError::IndexOutOfRange { .. }))
        ));
    }

    #[test]
    fn zero_parameters_give_uniform_logits_each_step() {
        let p = ModelParams::zeros(8, 4, &cfg(2, 1)).unwrap();
        let fi = features(3, 4, 1);
        let (logits, _) = forward(&p, FusionMode::Moe, &[4, 5], &fi, &[Vocab::BEGIN, 4]).unwrap();
        assert_eq!(logits.shape(), [2, 8]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        // All-zero logits softmax to exactly uniform; NLL per token is ln |V|.
        let l = loss_nll(&logits, &[4, 2]).unwrap();
        assert!((l - 2.0 * (8f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ModelParams::init(9, 4, &cfg(3, 2), &mut rng).unwrap();
        let fi = features(2, 4, 2);
        let (a, ra) = forward(&p, FusionMode::Moe, &[4, 6, 8], &fi, &[1, 4]).unwrap();
        let (b, rb) = forward(&p, FusionMode::Moe, &[4, 6, 8], &fi, &[1, 4]).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(ra, rb);
    }

    #[test]
    fn gate_and_single_expert_moe_agree_with_matched_parameters() {
        // One expert with w1 = [W | -W], w2 = [I ; -I] computes exactly
        // X·W through the relu pair, and the single selected expert's
        // softmax weight is exactly 1, so the mixture output equals the
        // dense gate's pre-sigmoid logits bit for bit.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 4usize;
        let v = 9usize;
        let mut p = ModelParams::init(
            v,
            d,
            &MoeConfig {
                num_experts: 1,
                top_k: 1,
                expert_hidden: 2 * d,
                load_balance: false,
            },
            &mut rng,
        )
        .unwrap();

        let w = {
            let mut g = Graph::new();
            let wl = g.constant(&p.gate.wl);
            let wv = g.constant(&p.gate.wv);
            let stacked = g.concat_rows(wl, wv).unwrap();
            g.value(stacked).clone()
        };
        let mut w1 = Vec::with_capacity(2 * d * 2 * d);
        for r in 0..2 * d {
            for c in 0..d {
                w1.push(w.get(r, c));
            }
            for c in 0..d {
                w1.push(-w.get(r, c));
            }
        }
        let mut w2 = vec![0.0; 2 * d * d];
        for i in 0..d {
            w2[i * d + i] = 1.0;
            w2[(d + i) * d + i] = -1.0;
        }
        p.moe.experts[0].w1 = Tensor::matrix(2 * d, 2 * d, w1).unwrap().with_grad();
        p.moe.experts[0].w2 = Tensor::matrix(2 * d, d, w2).unwrap().with_grad();

        let fi = features(3, d, 5);
        let ctx = [4, 5, 6, 7];
        let prev = [Vocab::BEGIN, 4, 5];
        let (gate_logits, _) = forward(&p, FusionMode::Gate, &ctx, &fi, &prev).unwrap();
        let (moe_logits, routing) = forward(&p, FusionMode::Moe, &ctx, &fi, &prev).unwrap();
        assert!(gate_logits.bit_eq(&moe_logits));
        assert!(routing.iter().all(|r| r.weights == [1.0]));
    }

    #[test]
    fn nll_matches_hand_softmax_and_checks_lengths() {
        // logits [0, ln 3]: p = [1/4, 3/4]; -ln(3/4) for target 1.
        let logits = Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap();
        let l = loss_nll(&logits, &[1]).unwrap();
        assert!((l - (-(0.75f64.ln()))).abs() < 1e-12);

        // One-hot-ish logits drive the loss toward zero.
        let confident = Tensor::matrix(1, 3, vec![50.0, 0.0, 0.0]).unwrap();
        assert!(loss_nll(&confident, &[0]).unwrap() < 1e-12);

        let two = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            loss_nll(&two, &[0]),
            Err(ModelError::LengthMismatch {
                steps: 2,
                targets: 1
            })
        ));
        assert!(matches!(loss_nll(&two, &[]), Err(ModelError::EmptyTarget)));
    }

    #[test]
    fn nll_is_invariant_to_per_row_logit_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let data: Vec<f64> = (0..3 * 5)
                .map(|_| rand::Rng::gen_range(&mut rng, -4.0..4.0))
                .collect();
            let logits = Tensor::matrix(3, 5, data.clone()).unwrap();
            let shift: f64 = rand::Rng::gen_range(&mut rng, -10.0..10.0);
            let row = rand::Rng::gen_range(&mut rng, 0..3usize);
            let mut shifted = data;
            for c in 0..5 {
                shifted[row * 5 + c] += shift;
            }
            let shifted = Tensor::matrix(3, 5, shifted).unwrap();
            let targets = [1usize, 4, 0];
            let a = loss_nll(&logits, &targets).unwrap();
            let b = loss_nll(&shifted, &targets).unwrap();
            assert!((a - b).abs() < 1e-9, "shift moved loss: {a} vs {b}");
        }
    }

    #[test]
    fn greedy_decode_stops_at_end_and_repeats_exactly() {
        // With all-zero params every step's logits are zero and argmax
        // picks id 0 (<pad>), never the end token: output fills max_len.
        let p = ModelParams::zeros(6, 4, &cfg(2, 1)).unwrap();
        let fi = features(2, 4, 7);
        let (toks, _) = greedy_decode(&p, FusionMode::Moe, &[4, 5], &fi, 3).unwrap();
        assert_eq!(toks, vec![0, 0, 0]);

        // Bias the end column up: empty decode.
        let mut p2 = ModelParams::zeros(6, 4, &cfg(2, 1)).unwrap();
        {
            let e = p2.prev_embed.data_mut();
            e[Vocab::BEGIN * 4] = 1.0;
        }
        {
            let r = p2.readout.data_mut();
            r[Vocab::END] = 5.0; // row 0, column END
        }
        let (toks2, _) = greedy_decode(&p2, FusionMode::Moe, &[4, 5], &fi, 4).unwrap();
        assert!(toks2.is_empty());

        let (again, _) = greedy_decode(&p2, FusionMode::Moe, &[4, 5], &fi, 4).unwrap();
        assert_eq!(toks2, again);
    }

    #[test]
    fn argmax_breaks_ties_toward_the_lowest_id() {
        assert_eq!(argmax_ties_low(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_ties_low(&[0.0, 0.0]), 0);
        assert_eq!(argmax_ties_low(&[f64::NAN, 1.0]), 1);
    }

    // Tiny contexts keep every expert's row count low: gradients that nearly
    // cancel across rows otherwise drop toward the relative-error floor where
    // finite-difference round-off dominates.
    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let moe_cfg = MoeConfig {
            num_experts: 4,
            top_k: 2,
            expert_hidden: 8,
            load_balance: false,
        };
        let params = ModelParams::init(16, 8, &moe_cfg, &mut rng).unwrap();
        let fi_a = features(2, 8, 208);
        let fi_b = features(3, 8, 209);
        let batch: Vec<(Vec<usize>, Vec<usize>, Tensor)> = vec![
            (vec![4, 9], vec![4, Vocab::END], fi_a),
            (vec![12], vec![15, Vocab::END], fi_b),
        ];

        for fusion in [FusionMode::Moe, FusionMode::Gate] {
            let template = params.clone();
            let batch = batch.clone();
            let build = move |named: &NamedTensors| -> Result<(Graph, NodeId), TensorError> {
                let p = template
                    .with_tensors(named)
                    .map_err(|e| TensorError::NonFiniteEval {
                        name: format!("rebuild: {e}"),
                    })?;
                let refs = batch
                    .iter()
                    .map(|(ctx, tgt, fi)| (ctx.as_slice(), tgt.as_slice(), fi));
                batch_loss_graph(&p, fusion, refs).map_err(|e| TensorError::NonFiniteEval {
                    name: format!("loss: {e}"),
                })
            };
            let err = grad_check(build, &params.named(), 1e-5).unwrap();
            assert!(err < 1e-4, "{fusion} fusion grad err {err}");
        }
    }
}
