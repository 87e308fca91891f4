//! Greedy and beam-search decoding of output spans.
//!
//! Candidates are ranked by total (length-unnormalized) log-probability,
//! ties broken by lexicographic token order so decoding is a pure function
//! of the parameters. Each step extends every live candidate with every
//! content token and with `<eos>`; extensions ending in `<eos>` retire to a
//! finished pool and the best `beam_size` unterminated extensions continue.
//! Other marker tokens are never proposed. Log-probabilities are taken from
//! the unmodified model distribution, so a hypothesis scores identically
//! here and under teacher forcing.
//!
//! Candidates still alive at the output-length cap are kept, flagged as
//! unterminated. The search stops early once the finished pool is full and
//! the best live total can no longer beat its worst member (totals only
//! fall as sequences grow).

use std::cmp::Ordering;
use std::collections::HashSet;

use thiserror::Error;

use crate::model::{infer, ContextTemplate, ModelError, ModelParams, TokenId};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam size must be positive")]
    ZeroBeam,
    #[error("max output length must be positive")]
    ZeroMaxLen,
    #[error("context needs {needed} positions but the model caps at {budget}")]
    ContextBudget { budget: usize, needed: usize },
    #[error("invalid hypothesis: {0}")]
    InvalidHypothesis(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Cap on output-span tokens, `<eos>` included.
    pub max_output_len: usize,
}

/// One decoded output span. `tokens` carries the trailing `<eos>` when the
/// sequence terminated; the content accessors strip it.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    tokens: Vec<TokenId>,
    per_token_logprob: Vec<f64>,
    total_logprob: f64,
    terminated: bool,
}

impl Hypothesis {
    /// Validates the shape invariants: non-empty, one log-probability per
    /// token, every value finite, `<eos>` nowhere but last. The total and
    /// the terminated flag are derived, never stored independently.
    pub fn new(tokens: Vec<TokenId>, per_token_logprob: Vec<f64>) -> Result<Self, DecodeError> {
        if tokens.is_empty() {
            return Err(DecodeError::InvalidHypothesis("empty token list".into()));
        }
        if tokens.len() != per_token_logprob.len() {
            return Err(DecodeError::InvalidHypothesis(format!(
                "{} tokens but {} log-probabilities",
                tokens.len(),
                per_token_logprob.len()
            )));
        }
        if per_token_logprob.iter().any(|lp| !lp.is_finite()) {
            return Err(DecodeError::InvalidHypothesis(
                "non-finite log-probability".into(),
            ));
        }
        if tokens[..tokens.len() - 1].contains(&crate::model::EOS) {
            return Err(DecodeError::InvalidHypothesis(
                "<eos> before the final position".into(),
            ));
        }
        let terminated = *tokens.last().expect("non-empty") == crate::model::EOS;
        let total_logprob = per_token_logprob.iter().sum();
        Ok(Hypothesis {
            tokens,
            per_token_logprob,
            total_logprob,
            terminated,
        })
    }

    /// Output-span tokens, trailing `<eos>` included when terminated.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn per_token_logprob(&self) -> &[f64] {
        &self.per_token_logprob
    }

    pub fn total_logprob(&self) -> f64 {
        self.total_logprob
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    /// Tokens without the trailing `<eos>`.
    pub fn content_tokens(&self) -> &[TokenId] {
        if self.terminated {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    pub fn content_len(&self) -> usize {
        self.content_tokens().len()
    }
}

/// Total log-probability descending, then lexicographic tokens.
fn rank_hypotheses(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.total_logprob
        .partial_cmp(&a.total_logprob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Clone)]
struct Candidate {
    tokens: Vec<TokenId>,
    lps: Vec<f64>,
    total: f64,
}

fn rank_candidates(a: &Candidate, b: &Candidate) -> Ordering {
    b.total
        .partial_cmp(&a.total)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn check_budget(
    params: &ModelParams,
    prefix_len: usize,
    max_output_len: usize,
) -> Result<(), DecodeError> {
    if max_output_len == 0 {
        return Err(DecodeError::ZeroMaxLen);
    }
    let needed = prefix_len + max_output_len;
    if needed > params.config.max_len {
        return Err(DecodeError::ContextBudget {
            budget: params.config.max_len,
            needed,
        });
    }
    Ok(())
}

/// Log-softmax of the next-token distribution after `context`.
fn next_distribution(params: &ModelParams, context: &[TokenId]) -> Result<Vec<f64>, DecodeError> {
    let logits = infer::logits(params, context)?;
    let v = params.config.vocab_size;
    Ok(infer::log_softmax_row(
        &logits[(context.len() - 1) * v..context.len() * v],
    ))
}

/// N-best decoding. Returns up to `beam_size` hypotheses, best first.
pub fn beam_search(
    params: &ModelParams,
    template: &ContextTemplate,
    input: &[TokenId],
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    if config.beam_size == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    let prefix = template.prefix(input)?;
    check_budget(params, prefix.len(), config.max_output_len)?;
    let vocab = template.vocab();
    let eos = vocab.eos();
    let allowed: Vec<TokenId> = std::iter::once(eos).chain(vocab.content_ids()).collect();

    let mut live = vec![Candidate {
        tokens: Vec::new(),
        lps: Vec::new(),
        total: 0.0,
    }];
    let mut pool: Vec<Candidate> = Vec::new();

    for _ in 0..config.max_output_len {
        let mut extensions: Vec<Candidate> = Vec::with_capacity(live.len() * allowed.len());
        for cand in &live {
            let mut context = prefix.clone();
            context.extend_from_slice(&cand.tokens);
            let lsm = next_distribution(params, &context)?;
            for &tok in &allowed {
                let lp = lsm[tok as usize];
                let mut next = cand.clone();
                next.tokens.push(tok);
                next.lps.push(lp);
                next.total += lp;
                if tok == eos {
                    pool.push(next);
                } else {
                    extensions.push(next);
                }
            }
        }
        pool.sort_by(rank_candidates);
        pool.truncate(config.beam_size);

        extensions.sort_by(rank_candidates);
        extensions.truncate(config.beam_size);
        live = extensions;

        if pool.len() == config.beam_size {
            let worst = pool.last().expect("pool is full").total;
            if live.first().map_or(true, |c| c.total < worst) {
                live.clear();
                break;
            }
        }
    }

    // Whatever survived the full loop sits at the length cap.
    pool.extend(live);
    pool.sort_by(rank_candidates);
    pool.truncate(config.beam_size);
    pool.into_iter()
        .map(|c| Hypothesis::new(c.tokens, c.lps))
        .collect()
}

/// Single-path decoding: at every step take the best-scoring token among
/// the content alphabet and `<eos>`, smallest id on ties, stopping at
/// `<eos>` or the length cap.
pub fn greedy_decode(
    params: &ModelParams,
    template: &ContextTemplate,
    input: &[TokenId],
    max_output_len: usize,
) -> Result<Hypothesis, DecodeError> {
    let mut context = template.prefix(input)?;
    check_budget(params, context.len(), max_output_len)?;
    let vocab = template.vocab();
    let eos = vocab.eos();
    // Ascending token ids, so a strict comparison keeps the smallest on ties.
    let allowed: Vec<TokenId> = std::iter::once(eos).chain(vocab.content_ids()).collect();

    let mut tokens = Vec::new();
    let mut lps = Vec::new();
    for _ in 0..max_output_len {
        let lsm = next_distribution(params, &context)?;
        let (tok, lp) = allowed
            .iter()
            .map(|&t| (t, lsm[t as usize]))
            .fold(None::<(TokenId, f64)>, |best, (t, lp)| match best {
                Some((_, blp)) if lp <= blp => best,
                _ => Some((t, lp)),
            })
            .expect("allowed token set is non-empty");
        tokens.push(tok);
        lps.push(lp);
        context.push(tok);
        if tok == eos {
            break;
        }
    }
    Hypothesis::new(tokens, lps)
}

/// Drops hypotheses whose content tokens duplicate a better-ranked one,
/// then keeps the `keep` best. Ranking matches the beam's: total
/// log-probability descending, lexicographic tokens on ties, so the higher
/// scoring instance of a duplicate survives.
pub fn dedupe_and_truncate(mut hypotheses: Vec<Hypothesis>, keep: usize) -> Vec<Hypothesis> {
    hypotheses.sort_by(rank_hypotheses);
    let mut seen: HashSet<Vec<TokenId>> = HashSet::with_capacity(hypotheses.len());
    hypotheses.retain(|h| seen.insert(h.content_tokens().to_vec()));
    hypotheses.truncate(keep);
    hypotheses
}
