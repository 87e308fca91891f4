//! Low-rank additive factors on the attention projections, for adapting a
//! trained model without touching its base weights.
//!
//! Each projection `W` (`dim x dim`) gets a pair of factors: `left`
//! (`dim x rank`) and `right` (`rank x dim`). The effective weight is
//! `W + scaling * left * right`. `right` starts as zeros, so a fresh adapter
//! leaves the model exactly unchanged. [`apply_adapter`] merges the factors
//! into a plain parameter set; the taped path keeps them separate so only
//! the factors receive gradients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{matmul_into, Tensor};

use super::{ModelConfig, ModelError, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub scaling: f64,
}

/// One projection's factor pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    /// `dim x rank`, randomly initialized.
    pub left: Tensor,
    /// `rank x dim`, zero-initialized so the fresh adapter is the identity.
    pub right: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayer {
    pub query: AdapterPair,
    pub key: AdapterPair,
    pub value: AdapterPair,
    pub out: AdapterPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub config: AdapterConfig,
    pub layers: Vec<AdapterLayer>,
}

fn pair_fields(l: &AdapterLayer) -> [(&'static str, &AdapterPair); 4] {
    [
        ("attn_query", &l.query),
        ("attn_key", &l.key),
        ("attn_value", &l.value),
        ("attn_out", &l.out),
    ]
}

fn pair_fields_mut(l: &mut AdapterLayer) -> [(&'static str, &mut AdapterPair); 4] {
    [
        ("attn_query", &mut l.query),
        ("attn_key", &mut l.key),
        ("attn_value", &mut l.value),
        ("attn_out", &mut l.out),
    ]
}

impl AdapterParams {
    /// Stable (name, tensor) listing, matching the leaf names the taped
    /// path registers.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 8);
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, pair) in pair_fields(layer) {
                out.push((format!("layer{i}.{field}.adapter_left"), &pair.left));
                out.push((format!("layer{i}.{field}.adapter_right"), &pair.right));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 8);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (field, pair) in pair_fields_mut(layer) {
                out.push((format!("layer{i}.{field}.adapter_left"), &mut pair.left));
                out.push((format!("layer{i}.{field}.adapter_right"), &mut pair.right));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Shape compatibility with a model config.
    pub fn check_against(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.layers.len() != config.layers {
            return Err(ModelError::InvalidConfig(format!(
                "adapter has {} layers, model has {}",
                self.layers.len(),
                config.layers
            )));
        }
        let d = config.dim;
        let r = self.config.rank;
        for (name, tensor) in self.named_tensors() {
            let expected: &[usize] = if name.ends_with("adapter_left") {
                &[d, r]
            } else {
                &[r, d]
            };
            if tensor.shape() != expected {
                return Err(ModelError::InvalidConfig(format!(
                    "adapter tensor {name} has shape {:?}, expected {expected:?}",
                    tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Fresh factors: `left` uniform in `±1/sqrt(dim)`, `right` zero.
pub fn init_adapters(
    config: &ModelConfig,
    adapter: &AdapterConfig,
    seed: u64,
) -> Result<AdapterParams, ModelError> {
    config.validate()?;
    if adapter.rank == 0 || adapter.rank > config.dim {
        return Err(ModelError::InvalidConfig(format!(
            "adapter rank {} outside 1..={}",
            adapter.rank, config.dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (config.dim as f64).sqrt();
    let d = config.dim;
    let r = adapter.rank;
    let mut pair = || -> AdapterPair {
        let left = (0..d * r).map(|_| rng.gen_range(-scale..scale)).collect();
        AdapterPair {
            left: Tensor::new(vec![d, r], left).expect("shape/data sizes agree"),
            right: Tensor::zeros(vec![r, d]),
        }
    };
    let layers = (0..config.layers)
        .map(|_| AdapterLayer {
            query: pair(),
            key: pair(),
            value: pair(),
            out: pair(),
        })
        .collect();
    Ok(AdapterParams {
        config: *adapter,
        layers,
    })
}

/// Merges the factors into a standalone parameter set. The arithmetic
/// matches the taped effective weights exactly.
pub fn apply_adapter(
    params: &ModelParams,
    adapters: &AdapterParams,
) -> Result<ModelParams, ModelError> {
    adapters.check_against(&params.config)?;
    let d = params.config.dim;
    let r = adapters.config.rank;
    let scaling = adapters.config.scaling;
    let mut merged = params.clone();
    let mut product = vec![0.0; d * d];
    for (layer, factors) in merged.layers.iter_mut().zip(&adapters.layers) {
        let targets = [
            (&mut layer.attn_query, &factors.query),
            (&mut layer.attn_key, &factors.key),
            (&mut layer.attn_value, &factors.value),
            (&mut layer.attn_out, &factors.out),
        ];
        for (weight, pair) in targets {
            matmul_into(pair.left.data(), pair.right.data(), &mut product, d, r, d);
            for (w, ab) in weight.data_mut().iter_mut().zip(&product) {
                *w += scaling * ab;
            }
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        forward_logits, infer, init_params, nll_loss, SequenceLayout, TokenId, TraceScope,
    };

    fn base() -> ModelParams {
        init_params(
            &ModelConfig {
                vocab_size: 8,
                dim: 8,
                heads: 2,
                layers: 2,
                max_len: 10,
            },
            21,
        )
        .unwrap()
    }

    fn adapter_config() -> AdapterConfig {
        AdapterConfig {
            rank: 2,
            scaling: 0.5,
        }
    }

    fn randomized_adapters(params: &ModelParams, seed: u64) -> AdapterParams {
        let mut adapters = init_adapters(&params.config, &adapter_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        for (_, t) in adapters.named_tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        adapters
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let params = base();
        let adapters = init_adapters(&params.config, &adapter_config(), 3).unwrap();
        for (name, t) in adapters.named_tensors() {
            if name.ends_with("adapter_right") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
        let merged = apply_adapter(&params, &adapters).unwrap();
        assert_eq!(merged, params);
    }

    #[test]
    fn taped_factors_match_merged_weights() {
        let params = base();
        let adapters = randomized_adapters(&params, 7);
        let tokens: Vec<TokenId> = vec![1, 4, 5, 6, 7, 2];
        let taped = forward_logits(&params, TraceScope::AdapterOnly(&adapters), &tokens).unwrap();
        let merged = apply_adapter(&params, &adapters).unwrap();
        let plain = infer::logits(&merged, &tokens).unwrap();
        assert_eq!(taped.data(), plain.as_slice());
    }

    #[test]
    fn gradients_flow_only_to_factors() {
        let params = base();
        let adapters = randomized_adapters(&params, 9);
        let tokens: Vec<TokenId> = vec![1, 4, 5, 6, 7, 2];
        let layout = SequenceLayout::new(1, 2, 3).unwrap();
        let mut trace =
            nll_loss(&params, TraceScope::AdapterOnly(&adapters), &tokens, &layout).unwrap();
        trace.run_backward().unwrap();
        let grads = trace.gradients().unwrap();
        let expected: Vec<String> = adapters.named_tensors().into_iter().map(|(n, _)| n).collect();
        let got: Vec<String> = grads.keys().cloned().collect();
        let mut sorted = expected.clone();
        sorted.sort();
        assert_eq!(got, sorted);
        assert_eq!(grads.len(), 2 * 4 * 2); // layers * projections * sides
    }

    #[test]
    fn factor_gradients_match_finite_differences() {
        // Numeric derivative goes through merge + gradient-free path.
        let params = base();
        let adapters = randomized_adapters(&params, 13);
        let tokens: Vec<TokenId> = vec![1, 4, 5, 6, 7, 2];
        let layout = SequenceLayout::new(1, 2, 3).unwrap();
        let mut trace =
            nll_loss(&params, TraceScope::AdapterOnly(&adapters), &tokens, &layout).unwrap();
        trace.run_backward().unwrap();
        let grads = trace.gradients().unwrap();

        let step = 1e-5;
        for name in [
            "layer0.attn_query.adapter_left",
            "layer1.attn_value.adapter_right",
            "layer1.attn_out.adapter_left",
        ] {
            let g = &grads[name];
            for index in [0, g.len() - 1] {
                let eval = |delta: f64| {
                    let mut shifted = adapters.clone();
                    for (n, t) in shifted.named_tensors_mut() {
                        if n == name {
                            t.data_mut()[index] += delta;
                        }
                    }
                    let merged = apply_adapter(&params, &shifted).unwrap();
                    infer::nll_with_nudge(&merged, &tokens, &layout, None).unwrap()
                };
                let numeric = (eval(step) - eval(-step)) / (2.0 * step);
                let analytic = g.data()[index];
                let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8);
                assert!(rel < 1e-4, "{name}[{index}]: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let params = base();
        let mut adapters = init_adapters(&params.config, &adapter_config(), 3).unwrap();
        adapters.layers.pop();
        assert!(matches!(
            apply_adapter(&params, &adapters),
            Err(ModelError::InvalidConfig(_))
        ));
        assert!(matches!(
            init_adapters(
                &params.config,
                &AdapterConfig {
                    rank: 0,
                    scaling: 1.0
                },
                0
            ),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    #[test]
    fn init_is_deterministic() {
        let params = base();
        let a = init_adapters(&params.config, &adapter_config(), 5).unwrap();
        let b = init_adapters(&params.config, &adapter_config(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.param_count(), 2 * 4 * 2 * (8 * 2));
    }
}
