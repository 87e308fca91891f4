//! Attention-times-gradient saliency and the prompt-reliance quality score.
//!
//! For a scored sequence, the model's own teacher-forced loss is
//! differentiated and each layer's attention heads are folded into a single
//! token-to-token attribution map: the head-summed product of attention
//! probabilities and their gradients, absolute value taken after the sum so
//! heads may cancel. Row `q` of the map attributes the prediction made at
//! query position `q`.
//!
//! A generated token leans on the prompt to the extent its prediction row
//! concentrates attribution mass on the leading marker tokens. That share,
//! `R` in `[0, 1]`, averaged over the content tokens of a hypothesis, is
//! the hypothesis quality score: low means grounded in the input, high
//! means steered by the prompt. Error tokens empirically score higher than
//! correct ones, which is what makes the score usable as a reward without
//! references.

use thiserror::Error;

use crate::align::TokenOutcomeSets;
use crate::graph::Tensor;
use crate::model::{
    nll_loss, AttentionRecord, ModelError, ModelParams, SequenceLayout, TokenId, TraceScope,
};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("saliency layer {layer} out of range for a {layers}-layer model")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("attention gradients missing after backward; tape bug")]
    MissingGradients,
    #[error("content length {content} exceeds the output span of {output}")]
    ContentTooLong { content: usize, output: usize },
    #[error("saliency map must be square over {expected} positions, got shape {shape:?}")]
    MapShape { expected: usize, shape: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which layer's attention feeds the attribution map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyLayer {
    /// The final layer (the default; closest to the prediction).
    Last,
    Index(usize),
    /// Average of every layer's map.
    Mean,
}

/// Token-to-token attribution for one scored context. Entry `(q, k)` is the
/// weight position `k` carried in the prediction made at query row `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    scores: Tensor,
    layout: SequenceLayout,
}

impl SaliencyMap {
    pub fn new(scores: Tensor, layout: SequenceLayout) -> Result<Self, SaliencyError> {
        let t = layout.total_len();
        if scores.shape() != [t, t] {
            return Err(SaliencyError::MapShape {
                expected: t,
                shape: scores.shape().to_vec(),
            });
        }
        Ok(SaliencyMap { scores, layout })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    /// Prompt-reliance `R` for the first `content_len` output tokens.
    ///
    /// Output token `i` lives at position `output_start + i` and is
    /// predicted from query row `output_start + i - 1` (token 0's row is
    /// the separator position). `R` is that row's prompt-column share of
    /// its total attribution; a row with zero total yields `R = 0` and a
    /// degenerate flag.
    pub fn prompt_reliance(&self, content_len: usize) -> Result<RelianceProfile, SaliencyError> {
        if content_len > self.layout.output_len() {
            return Err(SaliencyError::ContentTooLong {
                content: content_len,
                output: self.layout.output_len(),
            });
        }
        let t = self.layout.total_len();
        let output_start = self.layout.output().start;
        let mut values = Vec::with_capacity(content_len);
        let mut degenerate = Vec::with_capacity(content_len);
        for i in 0..content_len {
            let row = output_start + i - 1;
            let data = &self.scores.data()[row * t..(row + 1) * t];
            let total: f64 = data.iter().sum();
            let prompt: f64 = self.layout.prompt().map(|j| data[j]).sum();
            if total > 0.0 {
                values.push(prompt / total);
                degenerate.push(false);
            } else {
                values.push(0.0);
                degenerate.push(true);
            }
        }
        Ok(RelianceProfile { values, degenerate })
    }
}

/// Per-token prompt reliance of one hypothesis, content positions only.
#[derive(Debug, Clone, PartialEq)]
pub struct RelianceProfile {
    /// `R` per content token, each in `[0, 1]`.
    pub values: Vec<f64>,
    /// Marks tokens whose attribution row summed to zero; their `R` of 0 is
    /// a placeholder, not a measurement.
    pub degenerate: Vec<bool>,
}

impl RelianceProfile {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean prompt reliance over the content tokens: the hypothesis quality
/// score (lower is better). `None` for an empty profile.
pub fn hypothesis_quality(profile: &RelianceProfile) -> Option<f64> {
    if profile.values.is_empty() {
        return None;
    }
    Some(profile.values.iter().sum::<f64>() / profile.values.len() as f64)
}

/// Keeps entries whose quality score does not exceed `tau`.
pub fn threshold_filter<T>(items: Vec<(T, f64)>, tau: f64) -> Vec<(T, f64)> {
    items.into_iter().filter(|(_, q)| *q <= tau).collect()
}

/// Reliance mass split by token outcome, mergeable across utterances.
/// Degenerate tokens are excluded: a zero row carries no signal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelianceSummary {
    pub correct_sum: f64,
    pub correct_count: usize,
    pub error_sum: f64,
    pub error_count: usize,
}

impl RelianceSummary {
    pub fn merge(&mut self, other: &RelianceSummary) {
        self.correct_sum += other.correct_sum;
        self.correct_count += other.correct_count;
        self.error_sum += other.error_sum;
        self.error_count += other.error_count;
    }

    pub fn mean_correct(&self) -> Option<f64> {
        (self.correct_count > 0).then(|| self.correct_sum / self.correct_count as f64)
    }

    pub fn mean_error(&self) -> Option<f64> {
        (self.error_count > 0).then(|| self.error_sum / self.error_count as f64)
    }
}

/// Buckets a profile's reliance values by the alignment outcome of each
/// token. Token indices in `outcomes` refer to content positions, the same
/// indexing the profile uses.
pub fn reliance_summary(profile: &RelianceProfile, outcomes: &TokenOutcomeSets) -> RelianceSummary {
    let mut summary = RelianceSummary::default();
    for (i, (&r, &deg)) in profile.values.iter().zip(&profile.degenerate).enumerate() {
        if deg {
            continue;
        }
        if outcomes.correct.contains(&i) {
            summary.correct_sum += r;
            summary.correct_count += 1;
        } else if outcomes.error.contains(&i) {
            summary.error_sum += r;
            summary.error_count += 1;
        }
    }
    summary
}

/// Differentiates the sequence's own teacher-forced loss and folds the
/// requested layer(s) into an attribution map.
pub fn saliency_map(
    params: &ModelParams,
    tokens: &[TokenId],
    layout: &SequenceLayout,
    layer: SaliencyLayer,
) -> Result<SaliencyMap, SaliencyError> {
    let mut trace = nll_loss(params, TraceScope::Full, tokens, layout)?;
    trace.run_backward()?;
    let scores = fold_attention_records(&trace.attention_records(), params.config.layers, layer)?;
    SaliencyMap::new(scores, *layout)
}

/// Folds backward-annotated attention records into one attribution matrix:
/// within each layer, heads' probability-gradient products are summed
/// elementwise and the absolute value is taken after that sum, then
/// `layer` picks one layer's map or the mean over all of them.
pub fn fold_attention_records(
    records: &[AttentionRecord],
    layers: usize,
    layer: SaliencyLayer,
) -> Result<Tensor, SaliencyError> {
    let picked = match layer {
        SaliencyLayer::Last if layers > 0 => Some(layers - 1),
        SaliencyLayer::Last => {
            return Err(SaliencyError::LayerOutOfRange { layer: 0, layers })
        }
        SaliencyLayer::Index(l) if l < layers => Some(l),
        SaliencyLayer::Index(l) => {
            return Err(SaliencyError::LayerOutOfRange { layer: l, layers })
        }
        SaliencyLayer::Mean => None,
    };

    let first = records.first().ok_or(SaliencyError::MissingGradients)?;
    let t = first.probs.rows();
    let mut per_layer = vec![vec![0.0; t * t]; layers];
    for record in records {
        let grad = record.grad.as_ref().ok_or(SaliencyError::MissingGradients)?;
        if record.probs.shape() != [t, t] || grad.shape() != [t, t] {
            return Err(SaliencyError::MapShape {
                expected: t,
                shape: record.probs.shape().to_vec(),
            });
        }
        let acc = per_layer
            .get_mut(record.layer)
            .ok_or(SaliencyError::LayerOutOfRange {
                layer: record.layer,
                layers,
            })?;
        for (slot, (p, g)) in acc.iter_mut().zip(record.probs.data().iter().zip(grad.data())) {
            *slot += p * g;
        }
    }
    for layer_map in &mut per_layer {
        for v in layer_map.iter_mut() {
            *v = v.abs();
        }
    }

    let data = match picked {
        Some(l) => per_layer.swap_remove(l),
        None => {
            let mut mean = vec![0.0; t * t];
            for layer_map in &per_layer {
                for (m, v) in mean.iter_mut().zip(layer_map) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= layers as f64;
            }
            mean
        }
    };
    Ok(Tensor::matrix(t, t, data).expect("shape/data sizes agree"))
}
