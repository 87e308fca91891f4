//! Plain-array forward passes, used wherever gradients are not needed
//! (decoding, evaluation, frozen-reference scoring).
//!
//! The arithmetic mirrors [`super::trace`] operation for operation; tests
//! pin the two paths against each other. The attention-nudge hook exists for
//! gradient oracles: it injects an additive perturbation into one attention
//! entry so the true partial derivatives of the loss with respect to scores
//! or probabilities can be measured by central differences, independent of
//! the tape.

use crate::graph::{gelu, matmul_into, row_moments, softmax_row};

use super::{ModelConfig, ModelError, ModelParams, SequenceLayout, TokenId};

pub(crate) const MASK_NEG: f64 = -1e30;

/// Where to apply an additive perturbation inside one attention head.
#[derive(Debug, Clone, Copy)]
pub enum NudgeSite {
    /// Pre-softmax score entry.
    Score,
    /// Post-softmax probability entry (not renormalized).
    Prob,
}

/// Additive perturbation of a single attention entry, for finite-difference
/// oracles.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNudge {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
    pub site: NudgeSite,
}

pub(crate) fn check_context(config: &ModelConfig, tokens: &[TokenId]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() > config.max_len {
        return Err(ModelError::ContextTooLong {
            len: tokens.len(),
            max: config.max_len,
        });
    }
    for &t in tokens {
        if t as usize >= config.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: config.vocab_size,
            });
        }
    }
    Ok(())
}

/// Raw next-token scores, `T x V`, row `p` conditioned on `tokens[..=p]`.
pub fn logits(params: &ModelParams, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
    forward(params, tokens, None)
}

pub(crate) fn forward(
    params: &ModelParams,
    tokens: &[TokenId],
    nudge: Option<&AttentionNudge>,
) -> Result<Vec<f64>, ModelError> {
    check_context(&params.config, tokens)?;
    let t = tokens.len();
    let d = params.config.dim;
    let heads = params.config.heads;
    let hd = params.config.head_dim();
    let f = params.config.ffn_dim();
    let v = params.config.vocab_size;
    let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();

    // Embedding plus positions.
    let mut h = vec![0.0; t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let e = &params.embedding.data()[tok as usize * d..(tok as usize + 1) * d];
        let p = &params.positional.data()[i * d..(i + 1) * d];
        for j in 0..d {
            h[i * d + j] = e[j] + p[j];
        }
    }

    let mut normed = vec![0.0; t * d];
    let mut q = vec![0.0; t * d];
    let mut k = vec![0.0; t * d];
    let mut val = vec![0.0; t * d];
    let mut ctx = vec![0.0; t * d];
    let mut scores = vec![0.0; t * t];
    let mut ffn_hidden = vec![0.0; t * f];
    let mut ffn_out = vec![0.0; t * d];

    for (li, layer) in params.layers.iter().enumerate() {
        layer_norm_rows(
            &h,
            layer.norm_attn_gain.data(),
            layer.norm_attn_bias.data(),
            &mut normed,
            t,
            d,
        );
        matmul_into(&normed, layer.attn_query.data(), &mut q, t, d, d);
        matmul_into(&normed, layer.attn_key.data(), &mut k, t, d, d);
        matmul_into(&normed, layer.attn_value.data(), &mut val, t, d, d);

        for head in 0..heads {
            let off = head * hd;
            // Causal scores for this head.
            for i in 0..t {
                for j in 0..t {
                    scores[i * t + j] = if j > i {
                        MASK_NEG
                    } else {
                        let mut dot = 0.0;
                        for c in 0..hd {
                            dot += q[i * d + off + c] * k[j * d + off + c];
                        }
                        dot * inv_sqrt_hd
                    };
                }
            }
            if let Some(n) = nudge {
                if n.layer == li && n.head == head && matches!(n.site, NudgeSite::Score) {
                    scores[n.row * t + n.col] += n.delta;
                }
            }
            for i in 0..t {
                softmax_row(&mut scores[i * t..(i + 1) * t]);
            }
            if let Some(n) = nudge {
                if n.layer == li && n.head == head && matches!(n.site, NudgeSite::Prob) {
                    scores[n.row * t + n.col] += n.delta;
                }
            }
            // Head context into its column block.
            for i in 0..t {
                for c in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..=i.min(t - 1) {
                        let p = scores[i * t + j];
                        if p != 0.0 {
                            acc += p * val[j * d + off + c];
                        }
                    }
                    ctx[i * d + off + c] = acc;
                }
            }
        }

        matmul_into(&ctx, layer.attn_out.data(), &mut normed, t, d, d);
        for (hv, av) in h.iter_mut().zip(&normed) {
            *hv += av;
        }

        layer_norm_rows(
            &h,
            layer.norm_ffn_gain.data(),
            layer.norm_ffn_bias.data(),
            &mut normed,
            t,
            d,
        );
        matmul_into(&normed, layer.ffn_in.data(), &mut ffn_hidden, t, d, f);
        let b1 = layer.ffn_in_bias.data();
        for i in 0..t {
            for j in 0..f {
                ffn_hidden[i * f + j] = gelu(ffn_hidden[i * f + j] + b1[j]);
            }
        }
        matmul_into(&ffn_hidden, layer.ffn_out.data(), &mut ffn_out, t, f, d);
        let b2 = layer.ffn_out_bias.data();
        for i in 0..t {
            for j in 0..d {
                h[i * d + j] += ffn_out[i * d + j] + b2[j];
            }
        }
    }

    layer_norm_rows(
        &h,
        params.final_norm_gain.data(),
        params.final_norm_bias.data(),
        &mut normed,
        t,
        d,
    );
    let mut out = vec![0.0; t * v];
    matmul_into(&normed, params.output_proj.data(), &mut out, t, d, v);
    Ok(out)
}

fn layer_norm_rows(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64], t: usize, d: usize) {
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let (mean, inv_std) = row_moments(row, LN_EPS);
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * inv_std * gain[j] + bias[j];
        }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Log-softmax of one logits row.
pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - max - log_sum).collect()
}

pub(crate) fn sequence_logprob(
    params: &ModelParams,
    tokens: &[TokenId],
    layout: &SequenceLayout,
) -> Result<(f64, Vec<f64>), ModelError> {
    layout.check_tokens(tokens)?;
    if layout.output_len() == 0 {
        return Err(ModelError::EmptySpan("output"));
    }
    let all = logits(params, tokens)?;
    let v = params.config.vocab_size;
    let mut per_token = Vec::with_capacity(layout.output_len());
    for p in layout.output() {
        let row = &all[(p - 1) * v..p * v];
        let lsm = log_softmax_row(row);
        per_token.push(lsm[tokens[p] as usize]);
    }
    Ok((per_token.iter().sum(), per_token))
}

/// Mean negative log-likelihood of the output span, with an optional
/// attention perturbation. This is the finite-difference counterpart of the
/// taped loss; it never touches the graph machinery.
pub fn nll_with_nudge(
    params: &ModelParams,
    tokens: &[TokenId],
    layout: &SequenceLayout,
    nudge: Option<&AttentionNudge>,
) -> Result<f64, ModelError> {
    layout.check_tokens(tokens)?;
    if layout.output_len() == 0 {
        return Err(ModelError::EmptySpan("output"));
    }
    let all = forward(params, tokens, nudge)?;
    let v = params.config.vocab_size;
    let mut total = 0.0;
    for p in layout.output() {
        let row = &all[(p - 1) * v..p * v];
        let lsm = log_softmax_row(row);
        total += lsm[tokens[p] as usize];
    }
    Ok(-total / layout.output_len() as f64)
}
