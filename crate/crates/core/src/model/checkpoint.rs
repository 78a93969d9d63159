//! JSON checkpoints: config echo, parameter tensors, and training progress.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Matrix;

use super::train::{TrainConfig, TrainState, Trainer};
use super::{DynamicsModel, ModelConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major.
    pub values: Vec<f64>,
}

/// Per-step randomness is derived from `(seed, step)`, so these two values
/// are the full generator state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub parameter_count: usize,
    pub rng: RngState,
    pub state: TrainState,
    pub params: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_trainer<T: Scalar>(trainer: &Trainer<T>) -> Self {
        let model = &trainer.model;
        Self {
            format_version: CHECKPOINT_VERSION,
            model: model.config.clone(),
            train: trainer.config.clone(),
            parameter_count: model.parameter_count(),
            rng: RngState {
                seed: trainer.config.seed,
                step: trainer.state.step,
            },
            state: trainer.state.clone(),
            params: model
                .params
                .names
                .iter()
                .zip(&model.params.values)
                .map(|(name, m)| TensorRecord {
                    name: name.clone(),
                    shape: [m.rows, m.cols],
                    values: m.data.iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn model<T: Scalar>(&self) -> Result<DynamicsModel<T>> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        let names: Vec<String> = self.params.iter().map(|p| p.name.clone()).collect();
        let values = self
            .params
            .iter()
            .map(|p| {
                if p.values.len() != p.shape[0] * p.shape[1] {
                    return Err(Error::Format(format!("tensor `{}` size mismatch", p.name)));
                }
                if p.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Format(format!("tensor `{}` is not finite", p.name)));
                }
                Ok(Matrix::from_vec(
                    p.shape[0],
                    p.shape[1],
                    p.values.iter().map(|&v| T::lit(v)).collect(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        DynamicsModel::with_params(self.model.clone(), &names, values)
    }

    pub fn trainer<T: Scalar>(&self) -> Result<Trainer<T>> {
        let mut state = self.state.clone();
        state.step = self.rng.step;
        let mut train = self.train.clone();
        train.seed = self.rng.seed;
        Trainer::resume(self.model()?, train, state)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
