//! Decoder-only toy transformer for prefix-conditioned transduction.
//!
//! A context is one token sequence `[<bos> <task>] [x1..xL <sep>] [y1..yT]`
//! processed under a causal mask, so the prompt, the input symbols, and the
//! generated output attend within a single attention matrix. The model is
//! deliberately small: learned absolute positions, pre-norm blocks, GELU
//! feed-forward, untied output projection, every value an `f64`.
//!
//! Two forward paths exist on purpose. [`infer`] runs plain array math for
//! decoding, where gradients are never needed; [`trace`] builds the same
//! computation on a [`crate::graph::Graph`] for losses, gradients, and
//! attention capture. Tests pin the two paths to each other.

mod adapter;
pub mod infer;
mod trace;

pub use adapter::{
    apply_adapter, init_adapters, AdapterConfig, AdapterLayer, AdapterParams, AdapterPair,
};
pub use trace::{
    forward_logits, nll_loss, nll_loss_weighted, AttentionRecord, GradientSet, LossTrace,
    SequenceScorer, TraceScope,
};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, Tensor};

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("context of {len} tokens exceeds the positional table ({max})")]
    ContextTooLong { len: usize, max: usize },
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("layout covers {layout} positions but context has {tokens}")]
    LayoutMismatch { layout: usize, tokens: usize },
    #[error("layout has an empty {0} span")]
    EmptySpan(&'static str),
    #[error("{got} position weights for an output span of {expected}")]
    WeightCount { expected: usize, got: usize },
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size {} < 2",
                self.vocab_size
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.max_len == 0 {
            return Err(ModelError::InvalidConfig(
                "dim, heads, layers and max_len must be positive".to_string(),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn_query: Tensor,
    pub attn_key: Tensor,
    pub attn_value: Tensor,
    pub attn_out: Tensor,
    pub norm_attn_gain: Tensor,
    pub norm_attn_bias: Tensor,
    pub norm_ffn_gain: Tensor,
    pub norm_ffn_bias: Tensor,
    pub ffn_in: Tensor,
    pub ffn_in_bias: Tensor,
    pub ffn_out: Tensor,
    pub ffn_out_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub positional: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
    pub output_proj: Tensor,
}

impl ModelParams {
    /// Stable (name, tensor) listing; the order defines checkpoint layout
    /// and is shared with [`ModelParams::named_tensors_mut`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embedding".into(), &self.embedding),
            ("positional".into(), &self.positional),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, tensor) in layer_fields(layer) {
                out.push((format!("layer{i}.{field}"), tensor));
            }
        }
        out.push(("final_norm_gain".into(), &self.final_norm_gain));
        out.push(("final_norm_bias".into(), &self.final_norm_bias));
        out.push(("output_proj".into(), &self.output_proj));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embedding".into(), &mut self.embedding),
            ("positional".into(), &mut self.positional),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (field, tensor) in layer_fields_mut(layer) {
                out.push((format!("layer{i}.{field}"), tensor));
            }
        }
        out.push(("final_norm_gain".into(), &mut self.final_norm_gain));
        out.push(("final_norm_bias".into(), &mut self.final_norm_bias));
        out.push(("output_proj".into(), &mut self.output_proj));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn layer_fields(l: &LayerParams) -> Vec<(&'static str, &Tensor)> {
    vec![
        ("attn_query", &l.attn_query),
        ("attn_key", &l.attn_key),
        ("attn_value", &l.attn_value),
        ("attn_out", &l.attn_out),
        ("norm_attn_gain", &l.norm_attn_gain),
        ("norm_attn_bias", &l.norm_attn_bias),
        ("norm_ffn_gain", &l.norm_ffn_gain),
        ("norm_ffn_bias", &l.norm_ffn_bias),
        ("ffn_in", &l.ffn_in),
        ("ffn_in_bias", &l.ffn_in_bias),
        ("ffn_out", &l.ffn_out),
        ("ffn_out_bias", &l.ffn_out_bias),
    ]
}

fn layer_fields_mut(l: &mut LayerParams) -> Vec<(&'static str, &mut Tensor)> {
    vec![
        ("attn_query", &mut l.attn_query),
        ("attn_key", &mut l.attn_key),
        ("attn_value", &mut l.attn_value),
        ("attn_out", &mut l.attn_out),
        ("norm_attn_gain", &mut l.norm_attn_gain),
        ("norm_attn_bias", &mut l.norm_attn_bias),
        ("norm_ffn_gain", &mut l.norm_ffn_gain),
        ("norm_ffn_bias", &mut l.norm_ffn_bias),
        ("ffn_in", &mut l.ffn_in),
        ("ffn_in_bias", &mut l.ffn_in_bias),
        ("ffn_out", &mut l.ffn_out),
        ("ffn_out_bias", &mut l.ffn_out_bias),
    ]
}

/// Parameter count implied by a config; [`init_params`] must produce
/// exactly this many values.
pub fn expected_param_count(c: &ModelConfig) -> usize {
    let d = c.dim;
    let f = c.ffn_dim();
    let per_layer = 4 * d * d      // attention projections
        + 4 * d                    // two layer norms
        + d * f + f                // ffn in + bias
        + f * d + d; // ffn out + bias
    c.vocab_size * d               // embedding
        + c.max_len * d            // positions
        + c.layers * per_layer
        + 2 * d                    // final norm
        + d * c.vocab_size // output projection
}

/// Fresh parameters: weight matrices uniform in `±1/sqrt(dim)`, norm gains
/// one, biases zero. Same seed, same bits.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (config.dim as f64).sqrt();
    let mut mat = |rows: usize, cols: usize| -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::new(vec![rows, cols], data).expect("shape/data sizes agree")
    };

    let d = config.dim;
    let f = config.ffn_dim();
    let embedding = mat(config.vocab_size, d);
    let positional = mat(config.max_len, d);
    let layers = (0..config.layers)
        .map(|_| LayerParams {
            attn_query: mat(d, d),
            attn_key: mat(d, d),
            attn_value: mat(d, d),
            attn_out: mat(d, d),
            norm_attn_gain: Tensor::vector(vec![1.0; d]),
            norm_attn_bias: Tensor::vector(vec![0.0; d]),
            norm_ffn_gain: Tensor::vector(vec![1.0; d]),
            norm_ffn_bias: Tensor::vector(vec![0.0; d]),
            ffn_in: mat(d, f),
            ffn_in_bias: Tensor::vector(vec![0.0; f]),
            ffn_out: mat(f, d),
            ffn_out_bias: Tensor::vector(vec![0.0; d]),
        })
        .collect();
    let output_proj = mat(d, config.vocab_size);

    Ok(ModelParams {
        config: config.clone(),
        embedding,
        positional,
        layers,
        final_norm_gain: Tensor::vector(vec![1.0; d]),
        final_norm_bias: Tensor::vector(vec![0.0; d]),
        output_proj,
    })
}

/// Contiguous spans of one context: prompt, then input, then output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    prompt_len: usize,
    input_len: usize,
    output_len: usize,
}

impl SequenceLayout {
    pub fn new(
        prompt_len: usize,
        input_len: usize,
        output_len: usize,
    ) -> Result<Self, ModelError> {
        if prompt_len == 0 {
            return Err(ModelError::EmptySpan("prompt"));
        }
        if input_len == 0 {
            return Err(ModelError::EmptySpan("input"));
        }
        Ok(SequenceLayout {
            prompt_len,
            input_len,
            output_len,
        })
    }

    pub fn prompt(&self) -> std::ops::Range<usize> {
        0..self.prompt_len
    }

    pub fn input(&self) -> std::ops::Range<usize> {
        self.prompt_len..self.prompt_len + self.input_len
    }

    pub fn output(&self) -> std::ops::Range<usize> {
        let start = self.prompt_len + self.input_len;
        start..start + self.output_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn total_len(&self) -> usize {
        self.prompt_len + self.input_len + self.output_len
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.len() != self.total_len() {
            return Err(ModelError::LayoutMismatch {
                layout: self.total_len(),
                tokens: tokens.len(),
            });
        }
        Ok(())
    }
}

/// Token inventory: a handful of markers plus the content alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<String>,
    content_start: TokenId,
}

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const TASK_TAG: TokenId = 4;

const MARKERS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<transcribe>"];

impl Vocab {
    /// Markers plus `n` content symbols (`a`, `b`, ... then `s26`, `s27`,
    /// ... past the latin alphabet).
    pub fn for_alphabet(n: usize) -> Result<Vocab, ModelError> {
        let symbols = (0..n)
            .map(|i| {
                if i < 26 {
                    char::from(b'a' + i as u8).to_string()
                } else {
                    format!("s{i}")
                }
            })
            .collect::<Vec<_>>();
        Vocab::with_content(&symbols)
    }

    pub fn with_content(content: &[String]) -> Result<Vocab, ModelError> {
        if content.is_empty() {
            return Err(ModelError::Vocab("empty content alphabet".to_string()));
        }
        let mut symbols: Vec<String> = MARKERS.iter().map(|s| s.to_string()).collect();
        symbols.extend(content.iter().cloned());
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if s.is_empty() || s.contains(' ') || s.contains('\t') {
                return Err(ModelError::Vocab(format!(
                    "symbol {s:?} is empty or contains whitespace"
                )));
            }
            if !seen.insert(s.clone()) {
                return Err(ModelError::Vocab(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Vocab {
            symbols,
            content_start: MARKERS.len() as TokenId,
        })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn pad(&self) -> TokenId {
        PAD
    }

    pub fn bos(&self) -> TokenId {
        BOS
    }

    pub fn eos(&self) -> TokenId {
        EOS
    }

    pub fn sep(&self) -> TokenId {
        SEP
    }

    pub fn task_tag(&self) -> TokenId {
        TASK_TAG
    }

    pub fn is_content(&self, t: TokenId) -> bool {
        t >= self.content_start && (t as usize) < self.symbols.len()
    }

    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.content_start..self.symbols.len() as TokenId
    }

    pub fn content_count(&self) -> usize {
        self.symbols.len() - self.content_start as usize
    }

    /// Index of a content symbol within the content alphabet.
    pub fn content_index(&self, t: TokenId) -> Option<usize> {
        self.is_content(t).then(|| (t - self.content_start) as usize)
    }

    pub fn content_id(&self, index: usize) -> Option<TokenId> {
        (index < self.content_count()).then(|| self.content_start + index as TokenId)
    }

    pub fn symbol(&self, t: TokenId) -> Option<&str> {
        self.symbols.get(t as usize).map(String::as_str)
    }

    pub fn token(&self, symbol: &str) -> Option<TokenId> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .map(|i| i as TokenId)
    }
}

/// Assembles contexts in the fixed `[<bos> <task>] [x.. <sep>] [y..]` shape.
/// The prompt span is the two leading marker tokens; the trailing `<sep>`
/// belongs to the input span.
#[derive(Debug, Clone)]
pub struct ContextTemplate {
    vocab: Vocab,
}

impl ContextTemplate {
    pub fn new(vocab: Vocab) -> Self {
        ContextTemplate { vocab }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn check_input(&self, input: &[TokenId]) -> Result<(), ModelError> {
        if input.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        for &t in input {
            if !self.vocab.is_content(t) {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab: self.vocab.size(),
                });
            }
        }
        Ok(())
    }

    /// Context up to and including `<sep>`, ready for decoding to extend.
    pub fn prefix(&self, input: &[TokenId]) -> Result<Vec<TokenId>, ModelError> {
        self.check_input(input)?;
        let mut tokens = Vec::with_capacity(input.len() + 3);
        tokens.push(self.vocab.bos());
        tokens.push(self.vocab.task_tag());
        tokens.extend_from_slice(input);
        tokens.push(self.vocab.sep());
        Ok(tokens)
    }

    /// Full context for scoring `output` (which may carry a trailing
    /// `<eos>`) against `input`.
    pub fn scoring_context(
        &self,
        input: &[TokenId],
        output: &[TokenId],
    ) -> Result<(Vec<TokenId>, SequenceLayout), ModelError> {
        let mut tokens = self.prefix(input)?;
        tokens.extend_from_slice(output);
        let layout = SequenceLayout::new(2, input.len() + 1, output.len())?;
        Ok((tokens, layout))
    }

    pub fn layout_for(
        &self,
        input_len: usize,
        output_len: usize,
    ) -> Result<SequenceLayout, ModelError> {
        SequenceLayout::new(2, input_len + 1, output_len)
    }
}

/// Total log-probability of the output span plus the per-position values,
/// teacher-forcing the given context. Position `p` is scored by the
/// distribution computed at `p - 1`.
pub fn sequence_logprob(
    params: &ModelParams,
    tokens: &[TokenId],
    layout: &SequenceLayout,
) -> Result<(f64, Vec<f64>), ModelError> {
    infer::sequence_logprob(params, tokens, layout)
}
