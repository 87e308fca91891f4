//! Experiment configuration.
//!
//! One TOML file with nested sections; every field is optional and falls
//! back to the documented default, so a config file only needs the values
//! it changes. CLI flags override file values, and each flag can also be
//! set through a `SISDA_*` environment variable (flag > env > file >
//! default).
//!
//! ```toml
//! seed = 7
//!
//! [corpus]
//! alphabet = 26
//! shift = 3
//! target = { kind = "noise", p = 0.15, radius = 2 }
//!
//! [train]
//! epochs = 10
//!
//! [adapt]
//! method = "si-sda"
//! saliency_layer = "last"   # or "mean", or a layer index
//! ```

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sisda::adapt::{AdamConfig, AdaptConfig};
use sisda::data::{CorpusSpec, Corruption, SplitSizes, TaskSpec};
use sisda::decode::DecodeConfig;
use sisda::model::{AdapterConfig, ModelConfig};
use sisda::saliency::SaliencyLayer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub adapt: AdaptSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            adapt: AdaptSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    /// The fully resolved form, written next to run outputs so a run can
    /// be reproduced without the original file.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        self.corpus.to_spec()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            dim: self.model.dim,
            heads: self.model.heads,
            layers: self.model.layers,
            max_len: self.model.max_len,
        }
    }

    pub fn adapt_config(&self) -> Result<AdaptConfig> {
        Ok(AdaptConfig {
            epochs: self.adapt.epochs,
            beam_size: self.adapt.beam_size,
            keep_hypotheses: self.adapt.keep_hypotheses,
            max_output_len: self.adapt.max_output_len,
            quality_tau: self.adapt.quality_tau,
            saliency_layer: self.adapt.saliency_layer.resolve()?,
            optimizer: AdamConfig {
                learning_rate: self.adapt.learning_rate,
                ..AdamConfig::default()
            },
            dpo_beta: self.adapt.dpo_beta,
        })
    }

    pub fn train_optimizer(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.train.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn eval_decode(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.eval.beam_size,
            max_output_len: self.eval.max_output_len,
        }
    }

    pub fn adapter_config(&self) -> Option<AdapterConfig> {
        self.adapt.adapter.enabled.then(|| AdapterConfig {
            rank: self.adapt.adapter.rank,
            scaling: self.adapt.adapter.scaling,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub alphabet: usize,
    pub shift: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub source: Corruption,
    pub target: Corruption,
    pub source_train: usize,
    pub source_test: usize,
    pub target_adapt: usize,
    pub target_test: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let spec = CorpusSpec::default();
        CorpusSection {
            alphabet: spec.task.alphabet,
            shift: spec.task.shift,
            min_len: spec.min_len,
            max_len: spec.max_len,
            source: spec.source,
            target: spec.target,
            source_train: spec.counts.source_train,
            source_test: spec.counts.source_test,
            target_adapt: spec.counts.target_adapt,
            target_test: spec.counts.target_test,
        }
    }
}

impl CorpusSection {
    fn to_spec(&self) -> CorpusSpec {
        CorpusSpec {
            task: TaskSpec {
                alphabet: self.alphabet,
                shift: self.shift,
            },
            min_len: self.min_len,
            max_len: self.max_len,
            source: self.source.clone(),
            target: self.target.clone(),
            counts: SplitSizes {
                source_train: self.source_train,
                source_test: self.source_test,
                target_adapt: self.target_adapt,
                target_test: self.target_test,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            dim: 32,
            heads: 2,
            layers: 2,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 8,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    /// Method run when the `--method` flag is absent.
    pub method: String,
    pub epochs: usize,
    pub beam_size: usize,
    pub keep_hypotheses: usize,
    pub max_output_len: usize,
    pub quality_tau: f64,
    pub saliency_layer: LayerChoice,
    pub learning_rate: f64,
    pub dpo_beta: f64,
    pub adapter: AdapterSection,
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection {
            method: "si-sda".into(),
            epochs: 2,
            beam_size: 10,
            keep_hypotheses: 5,
            max_output_len: 24,
            quality_tau: 1.0,
            saliency_layer: LayerChoice::default(),
            learning_rate: 2e-4,
            dpo_beta: 0.1,
            adapter: AdapterSection::default(),
        }
    }
}

/// Low-rank adapter training instead of full fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub enabled: bool,
    pub rank: usize,
    pub scaling: f64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            enabled: false,
            rank: 4,
            scaling: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub beam_size: usize,
    pub max_output_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            beam_size: 4,
            max_output_len: 24,
        }
    }
}

/// Saliency layer selection as written in TOML: `"last"`, `"mean"`, or a
/// layer index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerChoice {
    Index(usize),
    Name(String),
}

impl Default for LayerChoice {
    fn default() -> Self {
        LayerChoice::Name("last".into())
    }
}

impl LayerChoice {
    pub fn resolve(&self) -> Result<SaliencyLayer> {
        match self {
            LayerChoice::Index(i) => Ok(SaliencyLayer::Index(*i)),
            LayerChoice::Name(name) if name == "last" => Ok(SaliencyLayer::Last),
            LayerChoice::Name(name) if name == "mean" => Ok(SaliencyLayer::Mean),
            LayerChoice::Name(name) => {
                bail!("saliency_layer must be \"last\", \"mean\", or a layer index, got {name:?}")
            }
        }
    }
}
