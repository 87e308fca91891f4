//! Unsupervised adaptation on decoded hypotheses, plus the supervised
//! trainer used for the base model and the labeled upper bound.
//!
//! Every unsupervised method shares one skeleton per utterance: beam-decode
//! N-best hypotheses with the current weights, deduplicate, turn them into
//! a differentiable objective, and take one optimizer step. They differ
//! only in the objective:
//!
//! * `si-sda` scores each hypothesis by mean prompt reliance and reinforces
//!   sequence log-probabilities weighted by the negated centered score, so
//!   below-average reliance is pushed up and above-average down.
//! * `self-train` is plain cross-entropy on the top hypothesis.
//! * `filtering` self-trains on pseudo-labels fixed at the start of each
//!   epoch, dropping the fifth of the corpus whose N-best lists disagree
//!   most internally (mean pairwise edit distance).
//! * `conf` weights each pseudo-label token by its own probability.
//! * `min-q` cross-entropies the hypothesis with the lowest reliance score.
//! * `dpo` prefers the lowest-reliance hypothesis over the highest against
//!   a reference model frozen at adaptation start.
//!
//! None of them can see references: they accept only the inputs-only
//! corpus view.
//!
//! Failures confined to one utterance (a context that overflows the model,
//! a decode error) skip that utterance and record the reason in its trace;
//! anything else aborts the run.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::align::{corpus_error_rate, edit_distance};
use crate::data::UnlabeledCorpus;
use crate::decode::{beam_search, dedupe_and_truncate, DecodeConfig, DecodeError, Hypothesis};
use crate::model::{
    apply_adapter, nll_loss, nll_loss_weighted, sequence_logprob, AdapterParams, ContextTemplate,
    GradientSet, ModelError, ModelParams, SequenceScorer, TokenId, TraceScope,
};
use crate::saliency::{
    hypothesis_quality, saliency_map, threshold_filter, SaliencyError, SaliencyLayer,
};

mod optim;

pub use optim::{Adam, AdamConfig, AdamState, Checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("gradient for {name} has shape {got:?}, parameter expects {expected:?}")]
    GradientShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint version {0} is not supported (expected {CHECKPOINT_VERSION})")]
    CheckpointVersion(u32),
    #[error("corpus holds no usable utterances")]
    EmptyCorpus,
    #[error("invalid adaptation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AdaptError {
    /// Data-dependent failures confined to one utterance. Everything else
    /// points at a bug or a broken setup and aborts the run.
    fn skips_utterance(&self) -> bool {
        matches!(
            self,
            AdaptError::Model(_) | AdaptError::Decode(_) | AdaptError::Saliency(_)
        )
    }
}

/// What gets updated: every model weight, or only low-rank adapter factors
/// around a frozen base.
#[derive(Debug, Clone, PartialEq)]
pub enum Trainable {
    Full(ModelParams),
    Adapter {
        base: ModelParams,
        adapters: AdapterParams,
    },
}

impl Trainable {
    /// Weights to run the model with: the parameters themselves, or the
    /// base with adapter factors merged in.
    pub fn effective(&self) -> Result<Cow<'_, ModelParams>, ModelError> {
        match self {
            Trainable::Full(params) => Ok(Cow::Borrowed(params)),
            Trainable::Adapter { base, adapters } => {
                Ok(Cow::Owned(apply_adapter(base, adapters)?))
            }
        }
    }

    /// Parameters losses are built on. Traces compose adapter factors on
    /// top of these themselves, driven by [`Trainable::scope`].
    pub fn base(&self) -> &ModelParams {
        match self {
            Trainable::Full(params) => params,
            Trainable::Adapter { base, .. } => base,
        }
    }

    pub fn scope(&self) -> TraceScope<'_> {
        match self {
            Trainable::Full(_) => TraceScope::Full,
            Trainable::Adapter { adapters, .. } => TraceScope::AdapterOnly(adapters),
        }
    }

    pub fn apply_step(
        &mut self,
        optimizer: &mut Adam,
        gradients: &GradientSet,
    ) -> Result<(), AdaptError> {
        match self {
            Trainable::Full(params) => optimizer.step(&mut params.named_tensors_mut(), gradients),
            Trainable::Adapter { adapters, .. } => {
                optimizer.step(&mut adapters.named_tensors_mut(), gradients)
            }
        }
    }

    pub fn to_checkpoint(&self, optimizer: Option<&AdamState>, epochs_done: usize) -> Checkpoint {
        let (params, adapters) = match self {
            Trainable::Full(params) => (params.clone(), None),
            Trainable::Adapter { base, adapters } => (base.clone(), Some(adapters.clone())),
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params,
            adapters,
            optimizer: optimizer.cloned(),
            epochs_done,
        }
    }

    pub fn from_checkpoint(checkpoint: Checkpoint) -> (Self, Option<AdamState>, usize) {
        let trainable = match checkpoint.adapters {
            Some(adapters) => Trainable::Adapter {
                base: checkpoint.params,
                adapters,
            },
            None => Trainable::Full(checkpoint.params),
        };
        (trainable, checkpoint.optimizer, checkpoint.epochs_done)
    }
}

/// Negated centered scores: `-(q - mean)`. A group of identical scores
/// yields exact zeros rather than accumulated rounding noise.
pub fn compute_advantages(qualities: &[f64]) -> Vec<f64> {
    let Some(&first) = qualities.first() else {
        return Vec::new();
    };
    if qualities.iter().all(|&q| q == first) {
        return vec![0.0; qualities.len()];
    }
    let mean = qualities.iter().sum::<f64>() / qualities.len() as f64;
    qualities.iter().map(|&q| -(q - mean)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    SiSda,
    SelfTrain,
    Filtered,
    Confidence,
    MinQuality,
    Dpo,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SiSda,
        Method::SelfTrain,
        Method::Filtered,
        Method::Confidence,
        Method::MinQuality,
        Method::Dpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SiSda => "si-sda",
            Method::SelfTrain => "self-train",
            Method::Filtered => "filtering",
            Method::Confidence => "conf",
            Method::MinQuality => "min-q",
            Method::Dpo => "dpo",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown adaptation method {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub beam_size: usize,
    /// N-best list length after deduplication.
    pub keep_hypotheses: usize,
    pub max_output_len: usize,
    /// Hypotheses with a reliance score above this are ignored by score
    ///-driven methods; 1.0 keeps everything since scores live in [0, 1].
    pub quality_tau: f64,
    pub saliency_layer: SaliencyLayer,
    pub optimizer: AdamConfig,
    pub dpo_beta: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 2,
            beam_size: 10,
            keep_hypotheses: 5,
            max_output_len: 24,
            quality_tau: 1.0,
            saliency_layer: SaliencyLayer::Last,
            optimizer: AdamConfig::default(),
            dpo_beta: 0.1,
        }
    }
}

impl AdaptConfig {
    fn validate(&self) -> Result<(), AdaptError> {
        let bad = |msg: &str| Err(AdaptError::InvalidConfig(msg.to_string()));
        if self.epochs == 0 {
            return bad("at least one epoch is required");
        }
        if self.beam_size == 0 || self.keep_hypotheses == 0 || self.max_output_len == 0 {
            return bad("beam size, kept hypotheses and output budget must be positive");
        }
        if !self.quality_tau.is_finite() {
            return bad("quality threshold must be finite");
        }
        if !(self.dpo_beta > 0.0) {
            return bad("preference temperature must be positive");
        }
        Ok(())
    }

    fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            max_output_len: self.max_output_len,
        }
    }
}

/// One utterance's slice of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceTrace {
    pub id: String,
    /// Mean reliance score over this utterance's scored hypotheses.
    pub mean_quality: Option<f64>,
    /// Objective value of the applied step; absent when skipped.
    pub loss: Option<f64>,
    /// Why no step happened, when it didn't.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Utterances that produced an optimizer step.
    pub updates: usize,
    /// Utterances skipped: filtered out, too few scoreable hypotheses, no
    /// score contrast, or a logged per-utterance failure.
    pub skipped: usize,
    pub mean_loss: Option<f64>,
    /// Mean reliance score over every hypothesis scored this epoch; only
    /// score-driven methods produce it.
    pub mean_quality: Option<f64>,
    /// Per-utterance records in corpus order.
    pub utterances: Vec<UtteranceTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptReport {
    pub method: Method,
    pub epochs: Vec<EpochReport>,
}

impl AdaptReport {
    pub fn final_mean_quality(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.mean_quality)
    }
}

#[derive(Default)]
struct EpochAccumulator {
    updates: usize,
    skipped: usize,
    loss_sum: f64,
    quality_sum: f64,
    quality_count: usize,
    utterances: Vec<UtteranceTrace>,
}

impl EpochAccumulator {
    fn record_quality(&mut self, q: f64) {
        self.quality_sum += q;
        self.quality_count += 1;
    }

    fn into_report(self, epoch: usize) -> EpochReport {
        EpochReport {
            epoch,
            updates: self.updates,
            skipped: self.skipped,
            mean_loss: (self.updates > 0).then(|| self.loss_sum / self.updates as f64),
            mean_quality: (self.quality_count > 0)
                .then(|| self.quality_sum / self.quality_count as f64),
            utterances: self.utterances,
        }
    }
}

const SKIP_FILTERED: &str = "dropped by the consistency filter";
const SKIP_EMPTY_BEAM: &str = "decoder produced no hypotheses";
const SKIP_NO_SCORED: &str = "no scoreable hypothesis";
const SKIP_TOO_FEW_SCORED: &str = "fewer than two hypotheses under the score threshold";
const SKIP_NO_CONTRAST: &str = "no score contrast across hypotheses";
const SKIP_DEGENERATE_PAIR: &str = "chosen and rejected hypotheses coincide";

/// One utterance's update, decoupled from the hypotheses that proposed it.
enum Plan {
    Skip(&'static str),
    CrossEntropy {
        output: Vec<TokenId>,
        weights: Option<Vec<f64>>,
    },
    Reinforce {
        outputs: Vec<Vec<TokenId>>,
        advantages: Vec<f64>,
    },
    Preference {
        chosen: Vec<TokenId>,
        rejected: Vec<TokenId>,
        reference_margin: f64,
    },
}

/// Adapts in place over `config.epochs` passes in corpus order, one
/// optimizer step per usable utterance.
pub fn adapt(
    trainable: &mut Trainable,
    method: Method,
    corpus: &UnlabeledCorpus,
    template: &ContextTemplate,
    config: &AdaptConfig,
) -> Result<AdaptReport, AdaptError> {
    adapt_with(trainable, method, corpus, template, config, |_, _| Ok(()))
}

/// [`adapt`] with an observer called after every epoch, for callers that
/// snapshot intermediate weights.
pub fn adapt_with(
    trainable: &mut Trainable,
    method: Method,
    corpus: &UnlabeledCorpus,
    template: &ContextTemplate,
    config: &AdaptConfig,
    mut after_epoch: impl FnMut(&EpochReport, &Trainable) -> Result<(), AdaptError>,
) -> Result<AdaptReport, AdaptError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(AdaptError::EmptyCorpus);
    }
    let reference = match method {
        Method::Dpo => Some(trainable.effective()?.into_owned()),
        _ => None,
    };
    let mut optimizer = Adam::new(config.optimizer);
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut acc = EpochAccumulator::default();
        let filtered_targets = match method {
            Method::Filtered => Some(filtered_epoch_targets(trainable, corpus, template, config)?),
            _ => None,
        };

        for (index, item) in corpus.items().iter().enumerate() {
            let planned = match &filtered_targets {
                Some(targets) => Ok(match &targets[index] {
                    Some(output) => (
                        Plan::CrossEntropy {
                            output: output.clone(),
                            weights: None,
                        },
                        None,
                    ),
                    None => (Plan::Skip(SKIP_FILTERED), None),
                }),
                None => plan_update(
                    trainable,
                    method,
                    item.input,
                    template,
                    config,
                    reference.as_ref(),
                    &mut acc,
                ),
            };
            let (outcome, quality) = match planned {
                Ok((Plan::Skip(reason), quality)) => (Err(reason.to_string()), quality),
                Ok((plan, quality)) => {
                    match apply_plan(trainable, &mut optimizer, template, item.input, plan, config)
                    {
                        Ok(loss) => (Ok(loss), quality),
                        Err(err) if err.skips_utterance() => (Err(err.to_string()), quality),
                        Err(err) => return Err(err),
                    }
                }
                Err(err) if err.skips_utterance() => (Err(err.to_string()), None),
                Err(err) => return Err(err),
            };
            match &outcome {
                Ok(loss) => {
                    acc.updates += 1;
                    acc.loss_sum += loss;
                }
                Err(_) => acc.skipped += 1,
            }
            acc.utterances.push(UtteranceTrace {
                id: item.id.to_string(),
                mean_quality: quality,
                loss: outcome.as_ref().ok().copied(),
                skipped: outcome.err(),
            });
        }
        let report = acc.into_report(epoch);
        after_epoch(&report, trainable)?;
        epochs.push(report);
    }
    Ok(AdaptReport { method, epochs })
}

/// Decodes and scores one utterance into an update plan, plus the mean
/// reliance score of its hypotheses when the method computes them.
fn plan_update(
    trainable: &Trainable,
    method: Method,
    input: &[TokenId],
    template: &ContextTemplate,
    config: &AdaptConfig,
    reference: Option<&ModelParams>,
    acc: &mut EpochAccumulator,
) -> Result<(Plan, Option<f64>), AdaptError> {
    let effective = trainable.effective()?;
    let params: &ModelParams = &effective;
    let hypotheses = beam_search(params, template, input, &config.decode())?;
    let kept = dedupe_and_truncate(hypotheses, config.keep_hypotheses);
    let Some(top) = kept.first() else {
        return Ok((Plan::Skip(SKIP_EMPTY_BEAM), None));
    };

    let plan = match method {
        Method::SelfTrain | Method::Filtered => {
            return Ok((
                Plan::CrossEntropy {
                    output: top.tokens().to_vec(),
                    weights: None,
                },
                None,
            ));
        }
        Method::Confidence => {
            return Ok((
                Plan::CrossEntropy {
                    output: top.tokens().to_vec(),
                    weights: Some(top.per_token_logprob().iter().map(|lp| lp.exp()).collect()),
                },
                None,
            ));
        }
        Method::SiSda => {
            let scored = score_kept(params, template, input, &kept, config, acc)?;
            let quality = mean_score(&scored);
            let usable = threshold_filter(scored, config.quality_tau);
            if usable.len() < 2 {
                return Ok((Plan::Skip(SKIP_TOO_FEW_SCORED), quality));
            }
            let qualities: Vec<f64> = usable.iter().map(|&(_, q)| q).collect();
            let advantages = compute_advantages(&qualities);
            if advantages.iter().all(|&a| a == 0.0) {
                return Ok((Plan::Skip(SKIP_NO_CONTRAST), quality));
            }
            let plan = Plan::Reinforce {
                outputs: usable
                    .iter()
                    .map(|&(i, _)| kept[i].tokens().to_vec())
                    .collect(),
                advantages,
            };
            (plan, quality)
        }
        Method::MinQuality => {
            let scored = score_kept(params, template, input, &kept, config, acc)?;
            let quality = mean_score(&scored);
            let best = scored
                .iter()
                .copied()
                .reduce(|best, cand| if cand.1 < best.1 { cand } else { best });
            match best {
                Some((i, _)) => (
                    Plan::CrossEntropy {
                        output: kept[i].tokens().to_vec(),
                        weights: None,
                    },
                    quality,
                ),
                None => (Plan::Skip(SKIP_NO_SCORED), quality),
            }
        }
        Method::Dpo => {
            let scored = score_kept(params, template, input, &kept, config, acc)?;
            let quality = mean_score(&scored);
            let chosen = scored
                .iter()
                .copied()
                .reduce(|best, cand| if cand.1 < best.1 { cand } else { best });
            let rejected = scored
                .iter()
                .copied()
                .reduce(|worst, cand| if cand.1 > worst.1 { cand } else { worst });
            let (Some(chosen), Some(rejected)) = (chosen, rejected) else {
                return Ok((Plan::Skip(SKIP_NO_SCORED), quality));
            };
            if chosen.0 == rejected.0 || chosen.1 == rejected.1 {
                return Ok((Plan::Skip(SKIP_DEGENERATE_PAIR), quality));
            }
            let frozen = reference.expect("reference snapshot exists for dpo");
            let margin_of = |hyp: &Hypothesis| -> Result<f64, AdaptError> {
                let (tokens, layout) = template.scoring_context(input, hyp.tokens())?;
                Ok(sequence_logprob(frozen, &tokens, &layout)?.0)
            };
            let reference_margin = margin_of(&kept[chosen.0])? - margin_of(&kept[rejected.0])?;
            let plan = Plan::Preference {
                chosen: kept[chosen.0].tokens().to_vec(),
                rejected: kept[rejected.0].tokens().to_vec(),
                reference_margin,
            };
            (plan, quality)
        }
    };
    Ok(plan)
}

fn mean_score(scored: &[(usize, f64)]) -> Option<f64> {
    (!scored.is_empty())
        .then(|| scored.iter().map(|&(_, q)| q).sum::<f64>() / scored.len() as f64)
}

/// Reliance score per scoreable kept hypothesis, as `(index, score)` into
/// the kept list. Hypotheses without content tokens cannot be scored and
/// are left out.
fn score_kept(
    params: &ModelParams,
    template: &ContextTemplate,
    input: &[TokenId],
    kept: &[Hypothesis],
    config: &AdaptConfig,
    acc: &mut EpochAccumulator,
) -> Result<Vec<(usize, f64)>, AdaptError> {
    let mut scored = Vec::with_capacity(kept.len());
    for (i, hyp) in kept.iter().enumerate() {
        if hyp.content_len() == 0 {
            continue;
        }
        let (tokens, layout) = template.scoring_context(input, hyp.tokens())?;
        let map = saliency_map(params, &tokens, &layout, config.saliency_layer)?;
        let profile = map.prompt_reliance(hyp.content_len())?;
        if let Some(q) = hypothesis_quality(&profile) {
            acc.record_quality(q);
            scored.push((i, q));
        }
    }
    Ok(scored)
}

/// Pseudo-labels for one filtered epoch: top hypotheses decoded with the
/// epoch-start weights, with the most self-inconsistent fifth of the
/// corpus (highest mean pairwise edit distance within the N-best list,
/// ties broken by utterance id) dropped.
fn filtered_epoch_targets(
    trainable: &Trainable,
    corpus: &UnlabeledCorpus,
    template: &ContextTemplate,
    config: &AdaptConfig,
) -> Result<Vec<Option<Vec<TokenId>>>, AdaptError> {
    let effective = trainable.effective()?;
    let params: &ModelParams = &effective;
    let mut diversities = Vec::with_capacity(corpus.len());
    let mut targets = Vec::with_capacity(corpus.len());
    for item in corpus.items() {
        let hypotheses = beam_search(params, template, item.input, &config.decode())?;
        let kept = dedupe_and_truncate(hypotheses, config.keep_hypotheses);
        diversities.push(nbest_diversity(&kept));
        targets.push(kept.first().map(|h| h.tokens().to_vec()));
    }

    let drop_count = corpus.len() / 5;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| {
        diversities[b]
            .total_cmp(&diversities[a])
            .then_with(|| corpus.items()[a].id.cmp(corpus.items()[b].id))
    });
    for &index in order.iter().take(drop_count) {
        targets[index] = None;
    }
    Ok(targets)
}

/// Mean pairwise edit distance between the content of an N-best list.
fn nbest_diversity(kept: &[Hypothesis]) -> f64 {
    if kept.len() < 2 {
        return 0.0;
    }
    let mut sum = 0usize;
    let mut pairs = 0usize;
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            sum += edit_distance(kept[i].content_tokens(), kept[j].content_tokens());
            pairs += 1;
        }
    }
    sum as f64 / pairs as f64
}

/// Builds the planned objective, backpropagates, and steps. Returns the
/// loss of the applied step.
fn apply_plan(
    trainable: &mut Trainable,
    optimizer: &mut Adam,
    template: &ContextTemplate,
    input: &[TokenId],
    plan: Plan,
    config: &AdaptConfig,
) -> Result<f64, AdaptError> {
    let (loss, gradients) = match plan {
        Plan::Skip(_) => unreachable!("skips are resolved before stepping"),
        Plan::CrossEntropy { output, weights } => {
            let (tokens, layout) = template.scoring_context(input, &output)?;
            let mut trace = match weights {
                Some(w) => {
                    nll_loss_weighted(trainable.base(), trainable.scope(), &tokens, &layout, &w)?
                }
                None => nll_loss(trainable.base(), trainable.scope(), &tokens, &layout)?,
            };
            trace.run_backward()?;
            (trace.loss_value(), trace.gradients()?)
        }
        Plan::Reinforce {
            outputs,
            advantages,
        } => {
            let mut scorer = SequenceScorer::new(trainable.base(), trainable.scope())?;
            let mut parts = Vec::with_capacity(outputs.len());
            for (output, &advantage) in outputs.iter().zip(&advantages) {
                let (tokens, layout) = template.scoring_context(input, output)?;
                let logprob = scorer.sequence_logprob(&tokens, &layout)?;
                parts.push(scorer.scale(logprob, -advantage)?);
            }
            let total = scorer.sum(&parts)?;
            scorer.finish(total)?
        }
        Plan::Preference {
            chosen,
            rejected,
            reference_margin,
        } => {
            let mut scorer = SequenceScorer::new(trainable.base(), trainable.scope())?;
            let (chosen_tokens, chosen_layout) = template.scoring_context(input, &chosen)?;
            let (rej_tokens, rej_layout) = template.scoring_context(input, &rejected)?;
            let lp_chosen = scorer.sequence_logprob(&chosen_tokens, &chosen_layout)?;
            let lp_rejected = scorer.sequence_logprob(&rej_tokens, &rej_layout)?;
            let neg_rejected = scorer.scale(lp_rejected, -1.0)?;
            let margin = scorer.add(lp_chosen, neg_rejected)?;
            let offset = scorer.constant(-reference_margin)?;
            let centered = scorer.add(margin, offset)?;
            let scaled = scorer.scale(centered, -config.dpo_beta)?;
            let loss = scorer.softplus(scaled)?;
            scorer.finish(loss)?
        }
    };
    trainable.apply_step(optimizer, &gradients)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
}

/// Teacher-forced cross-entropy over `(input, reference)` pairs, one step
/// per example in the given order, for `epochs` passes. The caller owns
/// the optimizer so interrupted runs can resume its moments.
pub fn train_supervised(
    trainable: &mut Trainable,
    examples: &[(&[TokenId], &[TokenId])],
    template: &ContextTemplate,
    epochs: usize,
    optimizer: &mut Adam,
) -> Result<TrainReport, AdaptError> {
    if examples.is_empty() {
        return Err(AdaptError::EmptyCorpus);
    }
    let eos = template.vocab().eos();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(epochs),
    };
    for epoch in 0..epochs {
        let mut loss_sum = 0.0;
        for &(input, reference) in examples {
            let mut output = reference.to_vec();
            output.push(eos);
            let (tokens, layout) = template.scoring_context(input, &output)?;
            let mut trace = nll_loss(trainable.base(), trainable.scope(), &tokens, &layout)?;
            trace.run_backward()?;
            let gradients = trace.gradients()?;
            loss_sum += trace.loss_value();
            trainable.apply_step(optimizer, &gradients)?;
        }
        report.epochs.push(EpochLoss {
            epoch,
            mean_loss: loss_sum / examples.len() as f64,
        });
    }
    Ok(report)
}

/// Token error rate of beam top hypotheses against references.
pub fn evaluate_error_rate(
    params: &ModelParams,
    template: &ContextTemplate,
    pairs: &[(&[TokenId], &[TokenId])],
    decode_config: &DecodeConfig,
) -> Result<f64, AdaptError> {
    if pairs.is_empty() {
        return Err(AdaptError::EmptyCorpus);
    }
    let mut decoded = Vec::with_capacity(pairs.len());
    for &(input, _) in pairs {
        let hypotheses = beam_search(params, template, input, decode_config)?;
        decoded.push(
            hypotheses
                .into_iter()
                .next()
                .expect("beam search yields at least one hypothesis"),
        );
    }
    corpus_error_rate(
        decoded
            .iter()
            .zip(pairs)
            .map(|(hyp, &(_, reference))| (hyp.content_tokens(), reference)),
    )
    .ok_or(AdaptError::EmptyCorpus)
}
