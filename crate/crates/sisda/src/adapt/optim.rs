//! Adam and the checkpoint format that lets training resume mid-run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::Tensor;
use crate::model::{AdapterParams, GradientSet, ModelParams};

use super::AdaptError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates keyed by parameter name. Serializable, so a resumed
/// run continues the exact trajectory an uninterrupted one would take.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: AdamState::default(),
        }
    }

    pub fn resume(config: AdamConfig, state: AdamState) -> Self {
        Adam { config, state }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// One bias-corrected update. Every listed parameter must have a
    /// matching gradient; moment buffers appear lazily on first use.
    pub fn step(
        &mut self,
        parameters: &mut [(String, &mut Tensor)],
        gradients: &GradientSet,
    ) -> Result<(), AdaptError> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let correction1 = 1.0 - self.config.beta1.powi(t);
        let correction2 = 1.0 - self.config.beta2.powi(t);
        for (name, tensor) in parameters.iter_mut() {
            let grad = gradients
                .get(name)
                .ok_or_else(|| AdaptError::MissingGradient(name.clone()))?;
            if grad.shape() != tensor.shape() {
                return Err(AdaptError::GradientShape {
                    name: name.clone(),
                    got: grad.shape().to_vec(),
                    expected: tensor.shape().to_vec(),
                });
            }
            let first = self
                .state
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.shape().to_vec()));
            let second = self
                .state
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.shape().to_vec()));
            let values = tensor.data_mut();
            let m = first.data_mut();
            let v = second.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                m[i] = self.config.beta1 * m[i] + (1.0 - self.config.beta1) * g;
                v[i] = self.config.beta2 * v[i] + (1.0 - self.config.beta2) * g * g;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                values[i] -= self.config.learning_rate * m_hat / (v_hat.sqrt() + self.config.epsilon);
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// A training snapshot: base parameters, adapter factors when only those
/// train, optimizer moments, and how many passes completed. JSON keeps
/// every float bit-exact through the shortest-round-trip encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ModelParams,
    pub adapters: Option<AdapterParams>,
    pub optimizer: Option<AdamState>,
    pub epochs_done: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), AdaptError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AdaptError> {
        let checkpoint: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(AdaptError::CheckpointVersion(checkpoint.version));
        }
        Ok(checkpoint)
    }
}
