//! Brute-force reference implementations.
//!
//! Everything here trades efficiency for obviousness so tests can check the
//! fast paths against an independent computation: a memo-free recursive edit
//! distance, an alignment chosen by enumerating operation sequences, and a
//! generator of random differentiable graphs for finite-difference sweeps.
//! None of it is used by the library's own algorithms.

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::align::{EditOp, TokenOutcomeSets};
use crate::graph::{finite_difference_check, Graph, GraphError, NodeId, Tensor};
use crate::model::{sequence_logprob, ContextTemplate, ModelError, ModelParams, TokenId};

/// Every sequence over `alphabet` symbols (token ids `0..alphabet`) with
/// length `0..=max_len`, shortest first.
pub fn all_sequences(alphabet: u32, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out: Vec<Vec<TokenId>> = vec![vec![]];
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * alphabet as usize);
        for seq in &frontier {
            for t in 0..alphabet {
                let mut s = seq.clone();
                s.push(t);
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Plain recursion on the textbook definition, no table. The only shortcut
/// is consuming equal heads, which preserves the recurrence.
pub fn edit_distance_recursive(a: &[TokenId], b: &[TokenId]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if a[0] == b[0] {
        return edit_distance_recursive(&a[1..], &b[1..]);
    }
    let sub = edit_distance_recursive(&a[1..], &b[1..]);
    let ins = edit_distance_recursive(&a[1..], b);
    let del = edit_distance_recursive(a, &b[1..]);
    1 + sub.min(ins).min(del)
}

/// Classifies hypothesis positions by exploring complete operation
/// sequences depth-first in preference order (match, substitution,
/// insertion, deletion) and taking the first one whose cost equals the
/// independently computed minimum. Exponential; keep inputs short.
pub fn classify_by_enumeration(
    hypothesis: &[TokenId],
    reference: &[TokenId],
) -> TokenOutcomeSets {
    let target = edit_distance_recursive(hypothesis, reference);
    let mut ops = Vec::new();
    let found = dfs(hypothesis, reference, 0, 0, target, &mut ops);
    assert!(found, "no alignment at minimal cost; oracle bug");
    let mut outcome = TokenOutcomeSets {
        correct: Default::default(),
        error: Default::default(),
    };
    let mut pos = 0usize;
    for op in &ops {
        match op {
            EditOp::Match => {
                outcome.correct.insert(pos);
                pos += 1;
            }
            EditOp::Substitution | EditOp::Insertion => {
                outcome.error.insert(pos);
                pos += 1;
            }
            EditOp::Deletion => {}
        }
    }
    outcome
}

fn dfs(
    hyp: &[TokenId],
    rf: &[TokenId],
    i: usize,
    j: usize,
    budget: usize,
    ops: &mut Vec<EditOp>,
) -> bool {
    if i == hyp.len() && j == rf.len() {
        return budget == 0;
    }
    // Preference order; the first complete sequence within budget wins.
    if i < hyp.len() && j < rf.len() && hyp[i] == rf[j] {
        ops.push(EditOp::Match);
        if dfs(hyp, rf, i + 1, j + 1, budget, ops) {
            return true;
        }
        ops.pop();
    }
    if budget > 0 {
        if i < hyp.len() && j < rf.len() && hyp[i] != rf[j] {
            ops.push(EditOp::Substitution);
            if dfs(hyp, rf, i + 1, j + 1, budget - 1, ops) {
                return true;
            }
            ops.pop();
        }
        if i < hyp.len() {
            ops.push(EditOp::Insertion);
            if dfs(hyp, rf, i + 1, j, budget - 1, ops) {
                return true;
            }
            ops.pop();
        }
        if j < rf.len() {
            ops.push(EditOp::Deletion);
            if dfs(hyp, rf, i, j + 1, budget - 1, ops) {
                return true;
            }
            ops.pop();
        }
    }
    false
}

/// Every possible decode of `input`, ranked the way the beam ranks: total
/// log-probability descending, lexicographic tokens on ties. Terminated
/// outputs are all content sequences short enough to fit `<eos>` inside the
/// length cap; unterminated ones sit exactly at the cap. Each entry is
/// `(output tokens, total log-probability, terminated)`. Exponential in the
/// cap; keep it small.
pub fn nbest_by_enumeration(
    params: &ModelParams,
    template: &ContextTemplate,
    input: &[TokenId],
    max_output_len: usize,
) -> Result<Vec<(Vec<TokenId>, f64, bool)>, ModelError> {
    let vocab = template.vocab();
    let eos = vocab.eos();
    let mut scored = Vec::new();
    for raw in all_sequences(vocab.content_count() as u32, max_output_len) {
        let mut tokens: Vec<TokenId> = raw
            .iter()
            .map(|&i| vocab.content_id(i as usize).expect("index within alphabet"))
            .collect();
        let terminated = tokens.len() < max_output_len;
        if terminated {
            tokens.push(eos);
        }
        let (context, layout) = template.scoring_context(input, &tokens)?;
        let (total, _) = sequence_logprob(params, &context, &layout)?;
        scored.push((tokens, total, terminated));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(scored)
}

// ---- random graphs for gradient checks ----

/// One op application in a generated graph, referring to earlier slots.
#[derive(Debug, Clone)]
enum Step {
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    SoftmaxRows(usize),
    LogOfSoftmax(usize),
    Gelu(usize),
    Softplus(usize),
    Transpose(usize),
    SliceCols(usize, usize, usize),
    ConcatRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    LayerNorm(usize),
}

/// A reproducible random differentiable graph: named leaf tensors plus a
/// straight-line program ending in a scalar. Dimensions stay at or below 8
/// and magnitudes are kept tame so finite differences are well conditioned.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub bindings: HashMap<String, Tensor>,
    steps: Vec<Step>,
    n_leaves: usize,
}

impl RandomGraph {
    pub fn generate(seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let n_leaves = rng.gen_range(2..=4);
        let mut bindings = HashMap::new();
        // (slot index, shape) for everything built so far; leaves first.
        let mut shapes: Vec<(usize, usize)> = Vec::new();
        for l in 0..n_leaves {
            let m = rng.gen_range(2..=6);
            let n = rng.gen_range(2..=6);
            let data = (0..m * n).map(|_| rng.gen_range(-1.5..1.5)).collect();
            bindings.insert(format!("leaf{l}"), Tensor::matrix(m, n, data).unwrap());
            shapes.push((m, n));
        }

        let mut steps = Vec::new();
        let n_steps = rng.gen_range(6..=20);
        for _ in 0..n_steps {
            let step = Self::pick_step(&mut rng, &shapes);
            let (m, n) = Self::result_shape(&step, &shapes);
            shapes.push((m, n));
            steps.push(step);
        }
        RandomGraph {
            bindings,
            steps,
            n_leaves,
        }
    }

    fn pick_step(rng: &mut StdRng, shapes: &[(usize, usize)]) -> Step {
        loop {
            let a = rng.gen_range(0..shapes.len());
            let (am, an) = shapes[a];
            match rng.gen_range(0..13) {
                0 => {
                    // Any partner whose row count equals our column count.
                    let partners: Vec<usize> = (0..shapes.len())
                        .filter(|&b| shapes[b].0 == an)
                        .collect();
                    if let Some(&b) = partners.get(rng.gen_range(0..partners.len().max(1))) {
                        return Step::MatMul(a, b);
                    }
                }
                1 => {
                    let partners: Vec<usize> = (0..shapes.len())
                        .filter(|&b| shapes[b] == (am, an))
                        .collect();
                    let b = partners[rng.gen_range(0..partners.len())];
                    return Step::Add(a, b);
                }
                2 => {
                    let partners: Vec<usize> = (0..shapes.len())
                        .filter(|&b| shapes[b] == (am, an))
                        .collect();
                    let b = partners[rng.gen_range(0..partners.len())];
                    return Step::Mul(a, b);
                }
                3 => return Step::Scale(a, rng.gen_range(-1.0..1.0)),
                4 => return Step::SoftmaxRows(a),
                5 => return Step::LogOfSoftmax(a),
                6 => return Step::Gelu(a),
                7 => return Step::Softplus(a),
                8 => return Step::Transpose(a),
                9 => {
                    if an >= 2 {
                        let start = rng.gen_range(0..an - 1);
                        let end = rng.gen_range(start + 1..=an);
                        return Step::SliceCols(a, start, end);
                    }
                }
                10 => {
                    let partners: Vec<usize> = (0..shapes.len())
                        .filter(|&b| shapes[b].1 == an)
                        .collect();
                    let b = partners[rng.gen_range(0..partners.len())];
                    return Step::ConcatRows(a, b);
                }
                11 => return Step::LayerNorm(a),
                _ => {
                    let k = rng.gen_range(1..=4);
                    let idx = (0..k).map(|_| rng.gen_range(0..am)).collect();
                    return Step::GatherRows(a, idx);
                }
            }
        }
    }

    fn result_shape(step: &Step, shapes: &[(usize, usize)]) -> (usize, usize) {
        match step {
            Step::MatMul(a, b) => (shapes[*a].0, shapes[*b].1),
            Step::Add(a, _)
            | Step::Mul(a, _)
            | Step::Scale(a, _)
            | Step::SoftmaxRows(a)
            | Step::LogOfSoftmax(a)
            | Step::Gelu(a)
            | Step::Softplus(a)
            | Step::LayerNorm(a) => shapes[*a],
            Step::Transpose(a) => (shapes[*a].1, shapes[*a].0),
            Step::SliceCols(a, s, e) => (shapes[*a].0, e - s),
            Step::ConcatRows(a, b) => (shapes[*a].0 + shapes[*b].0, shapes[*a].1),
            Step::GatherRows(a, idx) => (idx.len(), shapes[*a].1),
        }
    }

    pub fn leaf_names(&self) -> Vec<String> {
        (0..self.n_leaves).map(|l| format!("leaf{l}")).collect()
    }

    /// Interprets the program on a fresh tape and reduces to a scalar.
    pub fn build(
        &self,
        g: &mut Graph,
        bindings: &HashMap<String, Tensor>,
    ) -> Result<NodeId, GraphError> {
        let mut slots: Vec<NodeId> = Vec::new();
        for l in 0..self.n_leaves {
            let name = format!("leaf{l}");
            slots.push(g.leaf(&name, bindings[&name].clone())?);
        }
        for step in &self.steps {
            let id = match step {
                Step::MatMul(a, b) => {
                    let raw = g.matmul(slots[*a], slots[*b])?;
                    // Damp growth so deep chains stay well conditioned.
                    let k = g.value(slots[*a]).cols() as f64;
                    g.scale(raw, 1.0 / k)?
                }
                Step::Add(a, b) => g.add(slots[*a], slots[*b])?,
                Step::Mul(a, b) => g.mul(slots[*a], slots[*b])?,
                Step::Scale(a, f) => g.scale(slots[*a], *f)?,
                Step::SoftmaxRows(a) => g.softmax_rows(slots[*a])?,
                Step::LogOfSoftmax(a) => {
                    let s = g.softmax_rows(slots[*a])?;
                    g.log(s)?
                }
                Step::Gelu(a) => g.gelu(slots[*a])?,
                Step::Softplus(a) => g.softplus(slots[*a])?,
                Step::Transpose(a) => g.transpose(slots[*a])?,
                Step::SliceCols(a, s, e) => g.slice_cols(slots[*a], *s, *e)?,
                Step::ConcatRows(a, b) => g.concat_rows(&[slots[*a], slots[*b]])?,
                Step::GatherRows(a, idx) => g.gather_rows(slots[*a], idx)?,
                Step::LayerNorm(a) => {
                    let n = g.value(slots[*a]).cols();
                    let gain = g.constant(Tensor::vector(vec![1.0; n]))?;
                    let bias = g.constant(Tensor::vector(vec![0.0; n]))?;
                    g.layer_norm_rows(slots[*a], gain, bias, 1e-5)?
                }
            };
            slots.push(id);
        }
        let last = *slots.last().unwrap();
        g.sum_all(last)
    }

    /// Worst relative error across all leaves of this graph, by central
    /// finite differences at the given step.
    pub fn max_fd_error(&self, step: f64) -> Result<f64, GraphError> {
        let mut worst = 0.0f64;
        for leaf in self.leaf_names() {
            let err = finite_difference_check(
                &|g, b| self.build(g, b),
                &self.bindings,
                &leaf,
                step,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    }
}
