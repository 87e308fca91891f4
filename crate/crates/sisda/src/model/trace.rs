//! Taped forward passes: the same transformer as [`super::infer`], built on
//! a [`Graph`] so objectives differentiate end to end and attention entries
//! keep their gradients for inspection after the backward sweep.
//!
//! Losses over a single context go through [`nll_loss`] /
//! [`nll_loss_weighted`]. Objectives that combine several sequences under
//! one parameter binding (policy-gradient sums, preference margins) use a
//! [`SequenceScorer`], which reuses the same leaves across forwards so leaf
//! gradients accumulate over every term.

use std::collections::BTreeMap;

use crate::graph::{Graph, NodeId, Tensor};

use super::infer::{check_context, LN_EPS, MASK_NEG};
use super::{AdapterPair, AdapterParams, ModelConfig, ModelError, ModelParams, SequenceLayout, TokenId};

/// Which parameters the tape treats as trainable leaves.
#[derive(Clone, Copy)]
pub enum TraceScope<'a> {
    /// Every model tensor is a differentiable leaf.
    Full,
    /// Base weights are constants; only the low-rank attention factors are
    /// leaves. Each attention projection becomes
    /// `W + scaling * left * right`.
    AdapterOnly(&'a AdapterParams),
}

/// Leaf gradients keyed by parameter name, iterated in name order.
pub type GradientSet = BTreeMap<String, Tensor>;

/// One head's attention probabilities and, after a backward sweep, the
/// gradient of the objective with respect to them.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    /// Row-stochastic `T x T` matrix; row `i` attends over positions `..=i`.
    pub probs: Tensor,
    /// Same shape as `probs`; `None` until the owning trace ran backward.
    pub grad: Option<Tensor>,
}

struct AttnSlot {
    layer: usize,
    head: usize,
    probs: NodeId,
    scores: NodeId,
}

struct BoundLayer {
    attn_query: NodeId,
    attn_key: NodeId,
    attn_value: NodeId,
    attn_out: NodeId,
    norm_attn_gain: NodeId,
    norm_attn_bias: NodeId,
    norm_ffn_gain: NodeId,
    norm_ffn_bias: NodeId,
    ffn_in: NodeId,
    ffn_in_bias: NodeId,
    ffn_out: NodeId,
    ffn_out_bias: NodeId,
}

/// A graph with the model weights bound once, ready to run forwards.
struct Tracer {
    graph: Graph,
    config: ModelConfig,
    embedding: NodeId,
    positional: NodeId,
    layers: Vec<BoundLayer>,
    final_norm_gain: NodeId,
    final_norm_bias: NodeId,
    output_proj: NodeId,
    leaf_names: Vec<String>,
}

fn bind_plain(
    graph: &mut Graph,
    names: &mut Vec<String>,
    name: String,
    value: &Tensor,
    trainable: bool,
) -> Result<NodeId, ModelError> {
    if trainable {
        let id = graph.leaf(&name, value.clone())?;
        names.push(name);
        Ok(id)
    } else {
        Ok(graph.constant(value.clone())?)
    }
}

fn bind_effective(
    graph: &mut Graph,
    names: &mut Vec<String>,
    name: &str,
    base: &Tensor,
    pair: &AdapterPair,
    scaling: f64,
) -> Result<NodeId, ModelError> {
    let w = graph.constant(base.clone())?;
    let left = bind_plain(graph, names, format!("{name}.adapter_left"), &pair.left, true)?;
    let right = bind_plain(graph, names, format!("{name}.adapter_right"), &pair.right, true)?;
    let delta = graph.matmul(left, right)?;
    let scaled = graph.scale(delta, scaling)?;
    Ok(graph.add(w, scaled)?)
}

impl Tracer {
    fn new(params: &ModelParams, scope: TraceScope) -> Result<Self, ModelError> {
        params.config.validate()?;
        if let TraceScope::AdapterOnly(adapters) = scope {
            adapters.check_against(&params.config)?;
        }
        let full = matches!(scope, TraceScope::Full);
        let mut graph = Graph::new();
        let mut names = Vec::new();

        let embedding = bind_plain(&mut graph, &mut names, "embedding".into(), &params.embedding, full)?;
        let positional = bind_plain(&mut graph, &mut names, "positional".into(), &params.positional, full)?;

        let mut layers = Vec::with_capacity(params.layers.len());
        for (i, layer) in params.layers.iter().enumerate() {
            let name = |field: &str| format!("layer{i}.{field}");
            let (attn_query, attn_key, attn_value, attn_out) = match scope {
                TraceScope::Full => (
                    bind_plain(&mut graph, &mut names, name("attn_query"), &layer.attn_query, true)?,
                    bind_plain(&mut graph, &mut names, name("attn_key"), &layer.attn_key, true)?,
                    bind_plain(&mut graph, &mut names, name("attn_value"), &layer.attn_value, true)?,
                    bind_plain(&mut graph, &mut names, name("attn_out"), &layer.attn_out, true)?,
                ),
                TraceScope::AdapterOnly(adapters) => {
                    let a = &adapters.layers[i];
                    let s = adapters.config.scaling;
                    (
                        bind_effective(&mut graph, &mut names, &name("attn_query"), &layer.attn_query, &a.query, s)?,
                        bind_effective(&mut graph, &mut names, &name("attn_key"), &layer.attn_key, &a.key, s)?,
                        bind_effective(&mut graph, &mut names, &name("attn_value"), &layer.attn_value, &a.value, s)?,
                        bind_effective(&mut graph, &mut names, &name("attn_out"), &layer.attn_out, &a.out, s)?,
                    )
                }
            };
            layers.push(BoundLayer {
                attn_query,
                attn_key,
                attn_value,
                attn_out,
                norm_attn_gain: bind_plain(&mut graph, &mut names, name("norm_attn_gain"), &layer.norm_attn_gain, full)?,
                norm_attn_bias: bind_plain(&mut graph, &mut names, name("norm_attn_bias"), &layer.norm_attn_bias, full)?,
                norm_ffn_gain: bind_plain(&mut graph, &mut names, name("norm_ffn_gain"), &layer.norm_ffn_gain, full)?,
                norm_ffn_bias: bind_plain(&mut graph, &mut names, name("norm_ffn_bias"), &layer.norm_ffn_bias, full)?,
                ffn_in: bind_plain(&mut graph, &mut names, name("ffn_in"), &layer.ffn_in, full)?,
                ffn_in_bias: bind_plain(&mut graph, &mut names, name("ffn_in_bias"), &layer.ffn_in_bias, full)?,
                ffn_out: bind_plain(&mut graph, &mut names, name("ffn_out"), &layer.ffn_out, full)?,
                ffn_out_bias: bind_plain(&mut graph, &mut names, name("ffn_out_bias"), &layer.ffn_out_bias, full)?,
            });
        }

        let final_norm_gain = bind_plain(&mut graph, &mut names, "final_norm_gain".into(), &params.final_norm_gain, full)?;
        let final_norm_bias = bind_plain(&mut graph, &mut names, "final_norm_bias".into(), &params.final_norm_bias, full)?;
        let output_proj = bind_plain(&mut graph, &mut names, "output_proj".into(), &params.output_proj, full)?;

        Ok(Tracer {
            graph,
            config: params.config.clone(),
            embedding,
            positional,
            layers,
            final_norm_gain,
            final_norm_bias,
            output_proj,
            leaf_names: names,
        })
    }

    /// Runs the transformer on the tape; returns the `T x V` logits node.
    fn forward(
        &mut self,
        tokens: &[TokenId],
        mut slots: Option<&mut Vec<AttnSlot>>,
    ) -> Result<NodeId, ModelError> {
        check_context(&self.config, tokens)?;
        let t = tokens.len();
        let hd = self.config.head_dim();
        let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();
        let g = &mut self.graph;

        let idx: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let emb = g.gather_rows(self.embedding, &idx)?;
        let pos_idx: Vec<usize> = (0..t).collect();
        let pos = g.gather_rows(self.positional, &pos_idx)?;
        let mut h = g.add(emb, pos)?;
        let mask = g.constant(causal_mask(t))?;

        for (li, layer) in self.layers.iter().enumerate() {
            let a = g.layer_norm_rows(h, layer.norm_attn_gain, layer.norm_attn_bias, LN_EPS)?;
            let q = g.matmul(a, layer.attn_query)?;
            let k = g.matmul(a, layer.attn_key)?;
            let v = g.matmul(a, layer.attn_value)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for head in 0..self.config.heads {
                let off = head * hd;
                let qh = g.slice_cols(q, off, off + hd)?;
                let kh = g.slice_cols(k, off, off + hd)?;
                let vh = g.slice_cols(v, off, off + hd)?;
                let kt = g.transpose(kh)?;
                let raw = g.matmul(qh, kt)?;
                let scaled = g.scale(raw, inv_sqrt_hd)?;
                let masked = g.add(scaled, mask)?;
                let probs = g.softmax_rows(masked)?;
                if let Some(out) = slots.as_deref_mut() {
                    out.push(AttnSlot {
                        layer: li,
                        head,
                        probs,
                        scores: masked,
                    });
                }
                heads.push(g.matmul(probs, vh)?);
            }
            let ctx = g.concat_cols(&heads)?;
            let attn = g.matmul(ctx, layer.attn_out)?;
            h = g.add(h, attn)?;

            let f = g.layer_norm_rows(h, layer.norm_ffn_gain, layer.norm_ffn_bias, LN_EPS)?;
            let f1 = g.matmul(f, layer.ffn_in)?;
            let f1b = g.add_row(f1, layer.ffn_in_bias)?;
            let act = g.gelu(f1b)?;
            let f2 = g.matmul(act, layer.ffn_out)?;
            let f2b = g.add_row(f2, layer.ffn_out_bias)?;
            h = g.add(h, f2b)?;
        }

        let fin = g.layer_norm_rows(h, self.final_norm_gain, self.final_norm_bias, LN_EPS)?;
        Ok(g.matmul(fin, self.output_proj)?)
    }

    /// Scalar node: total log-probability of the output span, optionally
    /// weighting each position.
    fn masked_logprob(
        &mut self,
        tokens: &[TokenId],
        layout: &SequenceLayout,
        weights: &[f64],
        slots: Option<&mut Vec<AttnSlot>>,
    ) -> Result<NodeId, ModelError> {
        layout.check_tokens(tokens)?;
        if layout.output_len() == 0 {
            return Err(ModelError::EmptySpan("output"));
        }
        if weights.len() != layout.output_len() {
            return Err(ModelError::WeightCount {
                expected: layout.output_len(),
                got: weights.len(),
            });
        }
        let logits = self.forward(tokens, slots)?;
        let g = &mut self.graph;
        let probs = g.softmax_rows(logits)?;
        let logp = g.log(probs)?;
        let mask = g.constant(output_mask(tokens, layout, self.config.vocab_size, weights))?;
        let picked = g.mul(logp, mask)?;
        Ok(g.sum_all(picked)?)
    }

    fn collect_gradients(&self) -> Result<GradientSet, ModelError> {
        let mut out = GradientSet::new();
        for name in &self.leaf_names {
            out.insert(name.clone(), self.graph.leaf_grad(name)?.clone());
        }
        Ok(out)
    }
}

fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = MASK_NEG;
        }
    }
    Tensor::matrix(t, t, data).expect("shape/data sizes agree")
}

fn output_mask(tokens: &[TokenId], layout: &SequenceLayout, vocab: usize, weights: &[f64]) -> Tensor {
    let mut data = vec![0.0; tokens.len() * vocab];
    for (w, p) in weights.iter().zip(layout.output()) {
        data[(p - 1) * vocab + tokens[p] as usize] = *w;
    }
    Tensor::matrix(tokens.len(), vocab, data).expect("shape/data sizes agree")
}

/// Taped logits for one context; the gradient-free twin is
/// [`super::infer::logits`]. The two agree exactly, which tests rely on.
pub fn forward_logits(
    params: &ModelParams,
    scope: TraceScope,
    tokens: &[TokenId],
) -> Result<Tensor, ModelError> {
    let mut tracer = Tracer::new(params, scope)?;
    let id = tracer.forward(tokens, None)?;
    Ok(tracer.graph.value(id).clone())
}

/// Mean negative log-likelihood of the output span, on the tape.
pub fn nll_loss(
    params: &ModelParams,
    scope: TraceScope,
    tokens: &[TokenId],
    layout: &SequenceLayout,
) -> Result<LossTrace, ModelError> {
    nll_loss_weighted(params, scope, tokens, layout, &vec![1.0; layout.output_len()])
}

/// Mean negative log-likelihood with one weight per output position:
/// `-(1/T) * sum_p w_p * log P(token_p)`. Unit weights reduce to
/// [`nll_loss`].
pub fn nll_loss_weighted(
    params: &ModelParams,
    scope: TraceScope,
    tokens: &[TokenId],
    layout: &SequenceLayout,
    weights: &[f64],
) -> Result<LossTrace, ModelError> {
    let mut tracer = Tracer::new(params, scope)?;
    let mut slots = Vec::new();
    let total = tracer.masked_logprob(tokens, layout, weights, Some(&mut slots))?;
    let loss = tracer.graph.scale(total, -1.0 / layout.output_len() as f64)?;
    Ok(LossTrace {
        tracer,
        loss,
        slots,
    })
}

/// A scalar objective on the tape, with attention capture.
pub struct LossTrace {
    tracer: Tracer,
    loss: NodeId,
    slots: Vec<AttnSlot>,
}

impl LossTrace {
    pub fn loss_value(&self) -> f64 {
        self.tracer.graph.value(self.loss).item()
    }

    /// One reverse sweep from the loss. Must run before [`Self::gradients`]
    /// or before attention records carry gradients.
    pub fn run_backward(&mut self) -> Result<(), ModelError> {
        Ok(self.tracer.graph.backward(self.loss)?)
    }

    pub fn gradients(&self) -> Result<GradientSet, ModelError> {
        self.tracer.collect_gradients()
    }

    /// Every head's attention probabilities, ordered by layer then head.
    pub fn attention_records(&self) -> Vec<AttentionRecord> {
        self.slots
            .iter()
            .map(|s| AttentionRecord {
                layer: s.layer,
                head: s.head,
                probs: self.tracer.graph.value(s.probs).clone(),
                grad: self.tracer.graph.grad(s.probs).cloned(),
            })
            .collect()
    }

    /// Gradient of the objective with respect to one head's masked
    /// pre-softmax scores, if backward has run.
    pub fn score_gradient(&self, layer: usize, head: usize) -> Option<&Tensor> {
        self.slots
            .iter()
            .find(|s| s.layer == layer && s.head == head)
            .and_then(|s| self.tracer.graph.grad(s.scores))
    }
}

/// Several sequence log-probabilities under one parameter binding, combined
/// into a single scalar objective. Used for policy-gradient and preference
/// losses where gradients must sum across sequences.
pub struct SequenceScorer {
    tracer: Tracer,
}

impl SequenceScorer {
    pub fn new(params: &ModelParams, scope: TraceScope) -> Result<Self, ModelError> {
        Ok(SequenceScorer {
            tracer: Tracer::new(params, scope)?,
        })
    }

    /// Scalar node: total log-probability of the context's output span.
    pub fn sequence_logprob(
        &mut self,
        tokens: &[TokenId],
        layout: &SequenceLayout,
    ) -> Result<NodeId, ModelError> {
        let weights = vec![1.0; layout.output_len()];
        self.tracer.masked_logprob(tokens, layout, &weights, None)
    }

    pub fn constant(&mut self, value: f64) -> Result<NodeId, ModelError> {
        Ok(self.tracer.graph.constant(Tensor::scalar(value))?)
    }

    pub fn scale(&mut self, node: NodeId, factor: f64) -> Result<NodeId, ModelError> {
        Ok(self.tracer.graph.scale(node, factor)?)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ModelError> {
        Ok(self.tracer.graph.add(a, b)?)
    }

    pub fn softplus(&mut self, node: NodeId) -> Result<NodeId, ModelError> {
        Ok(self.tracer.graph.softplus(node)?)
    }

    /// Chained addition of one or more scalar nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId, ModelError> {
        let (&first, rest) = parts.split_first().ok_or(ModelError::EmptySequence)?;
        let mut acc = first;
        for &p in rest {
            acc = self.tracer.graph.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Current value of a scalar node.
    pub fn value(&self, node: NodeId) -> f64 {
        self.tracer.graph.value(node).item()
    }

    /// Backward from `root`; returns its value and the leaf gradients.
    pub fn finish(mut self, root: NodeId) -> Result<(f64, GradientSet), ModelError> {
        let value = self.tracer.graph.value(root).item();
        self.tracer.graph.backward(root)?;
        let grads = self.tracer.collect_gradients()?;
        Ok((value, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{infer, init_params};

    fn test_params() -> ModelParams {
        init_params(
            &ModelConfig {
                vocab_size: 8,
                dim: 8,
                heads: 2,
                layers: 2,
                max_len: 10,
            },
            11,
        )
        .unwrap()
    }

    fn test_context() -> (Vec<TokenId>, SequenceLayout) {
        (vec![1, 3, 4, 5, 6, 7], SequenceLayout::new(1, 2, 3).unwrap())
    }

    #[test]
    fn two_paths_produce_identical_logits() {
        let params = test_params();
        let tokens: Vec<TokenId> = vec![1, 4, 2, 7, 0, 3, 5];
        let plain = infer::logits(&params, &tokens).unwrap();
        let taped = forward_logits(&params, TraceScope::Full, &tokens).unwrap();
        assert_eq!(taped.shape(), &[7, 8]);
        assert_eq!(taped.data(), plain.as_slice());
    }

    #[test]
    fn taped_nll_matches_plain_path() {
        let params = test_params();
        let (tokens, layout) = test_context();
        let trace = nll_loss(&params, TraceScope::Full, &tokens, &layout).unwrap();
        let plain = infer::nll_with_nudge(&params, &tokens, &layout, None).unwrap();
        assert!(
            (trace.loss_value() - plain).abs() < 1e-12,
            "{} vs {plain}",
            trace.loss_value()
        );
    }

    fn bump(params: &mut ModelParams, name: &str, index: usize, delta: f64) {
        for (n, t) in params.named_tensors_mut() {
            if n == name {
                t.data_mut()[index] += delta;
                return;
            }
        }
        panic!("unknown parameter {name}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // Numeric side runs on the gradient-free path, so this checks the
        // tape against an independent implementation of the same model.
        let params = test_params();
        let (tokens, layout) = test_context();
        let mut trace = nll_loss(&params, TraceScope::Full, &tokens, &layout).unwrap();
        trace.run_backward().unwrap();
        let grads = trace.gradients().unwrap();

        let step = 1e-5;
        for name in [
            "embedding",
            "positional",
            "layer0.attn_query",
            "layer0.norm_ffn_gain",
            "layer1.attn_out",
            "layer1.ffn_in_bias",
            "final_norm_gain",
            "output_proj",
        ] {
            let g = &grads[name];
            for index in [0, g.len() / 2, g.len() - 1] {
                let mut plus = params.clone();
                bump(&mut plus, name, index, step);
                let f_plus = infer::nll_with_nudge(&plus, &tokens, &layout, None).unwrap();
                let mut minus = params.clone();
                bump(&mut minus, name, index, -step);
                let f_minus = infer::nll_with_nudge(&minus, &tokens, &layout, None).unwrap();
                let numeric = (f_plus - f_minus) / (2.0 * step);
                let analytic = g.data()[index];
                let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8);
                assert!(rel < 1e-4, "{name}[{index}]: {analytic} vs {numeric} (rel {rel})");
            }
        }
    }

    #[test]
    fn attention_gradients_match_nudge_oracle() {
        let params = test_params();
        let (tokens, layout) = test_context();
        let mut trace = nll_loss(&params, TraceScope::Full, &tokens, &layout).unwrap();
        trace.run_backward().unwrap();
        let records = trace.attention_records();

        let delta = 1e-6;
        let cases = [(0usize, 1usize, 2usize, 1usize), (1, 0, 4, 3)];
        for (layer, head, row, col) in cases {
            for site in [infer::NudgeSite::Prob, infer::NudgeSite::Score] {
                let numeric = {
                    let run = |d: f64| {
                        infer::nll_with_nudge(
                            &params,
                            &tokens,
                            &layout,
                            Some(&infer::AttentionNudge {
                                layer,
                                head,
                                row,
                                col,
                                delta: d,
                                site,
                            }),
                        )
                        .unwrap()
                    };
                    (run(delta) - run(-delta)) / (2.0 * delta)
                };
                let analytic = match site {
                    infer::NudgeSite::Prob => {
                        let rec = records
                            .iter()
                            .find(|r| r.layer == layer && r.head == head)
                            .unwrap();
                        rec.grad.as_ref().unwrap().get2(row, col)
                    }
                    infer::NudgeSite::Score => {
                        trace.score_gradient(layer, head).unwrap().get2(row, col)
                    }
                };
                let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8);
                assert!(
                    rel < 1e-4,
                    "layer {layer} head {head} ({row},{col}) {site:?}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn weighted_loss_drops_zeroed_positions() {
        let params = test_params();
        let (tokens, layout) = test_context();
        let (_, per_token) = infer::sequence_logprob(&params, &tokens, &layout).unwrap();
        let weighted =
            nll_loss_weighted(&params, TraceScope::Full, &tokens, &layout, &[1.0, 0.0, 2.0])
                .unwrap();
        let expected = -(per_token[0] + 2.0 * per_token[2]) / 3.0;
        assert!((weighted.loss_value() - expected).abs() < 1e-12);
    }

    #[test]
    fn weight_count_is_checked() {
        let params = test_params();
        let (tokens, layout) = test_context();
        assert!(matches!(
            nll_loss_weighted(&params, TraceScope::Full, &tokens, &layout, &[1.0]),
            Err(ModelError::WeightCount {
                expected: 3,
                got: 1
            })
        ));
    }

    #[test]
    fn gradients_before_backward_are_an_error() {
        let params = test_params();
        let (tokens, layout) = test_context();
        let trace = nll_loss(&params, TraceScope::Full, &tokens, &layout).unwrap();
        assert!(trace.gradients().is_err());
        assert!(trace.attention_records()[0].grad.is_none());
    }

    #[test]
    fn gradient_set_covers_every_parameter() {
        let params = test_params();
        let (tokens, layout) = test_context();
        let mut trace = nll_loss(&params, TraceScope::Full, &tokens, &layout).unwrap();
        trace.run_backward().unwrap();
        let grads = trace.gradients().unwrap();
        assert_eq!(grads.len(), params.named_tensors().len());
        for (name, tensor) in params.named_tensors() {
            assert_eq!(grads[&name].shape(), tensor.shape(), "{name}");
        }
    }

    #[test]
    fn scorer_total_matches_plain_logprob() {
        let params = test_params();
        let (tokens, layout) = test_context();
        let mut scorer = SequenceScorer::new(&params, TraceScope::Full).unwrap();
        let node = scorer.sequence_logprob(&tokens, &layout).unwrap();
        let (plain, _) = infer::sequence_logprob(&params, &tokens, &layout).unwrap();
        assert!((scorer.value(node) - plain).abs() < 1e-12);
    }

    #[test]
    fn combined_objective_gradients_are_linear() {
        let params = test_params();
        let (tokens_a, layout_a) = test_context();
        let tokens_b: Vec<TokenId> = vec![1, 3, 6, 6, 4, 5];
        let layout_b = SequenceLayout::new(1, 2, 3).unwrap();
        let (c_a, c_b) = (0.75, -1.5);

        let single = |tokens: &[TokenId], layout: &SequenceLayout| -> GradientSet {
            let mut scorer = SequenceScorer::new(&params, TraceScope::Full).unwrap();
            let lp = scorer.sequence_logprob(tokens, layout).unwrap();
            scorer.finish(lp).unwrap().1
        };
        let ga = single(&tokens_a, &layout_a);
        let gb = single(&tokens_b, &layout_b);

        let mut scorer = SequenceScorer::new(&params, TraceScope::Full).unwrap();
        let lp_a = scorer.sequence_logprob(&tokens_a, &layout_a).unwrap();
        let lp_b = scorer.sequence_logprob(&tokens_b, &layout_b).unwrap();
        let sa = scorer.scale(lp_a, c_a).unwrap();
        let sb = scorer.scale(lp_b, c_b).unwrap();
        let root = scorer.sum(&[sa, sb]).unwrap();
        let (_, combined) = scorer.finish(root).unwrap();

        for (name, g) in &combined {
            for i in 0..g.len() {
                let expected = c_a * ga[name].data()[i] + c_b * gb[name].data()[i];
                assert!(
                    (g.data()[i] - expected).abs() < 1e-12,
                    "{name}[{i}]: {} vs {expected}",
                    g.data()[i]
                );
            }
        }
    }
}
