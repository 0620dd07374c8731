use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::model::{Dense, MlpModel};
use super::train::TrainConfig;
use crate::error::{Error, Result};

/// On-disk form of a trained model.
///
/// `weights[l][i][j]` connects input unit `i` of layer `l` to output unit `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: String,
    pub train_config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub final_val_accuracy: Option<f64>,
}

pub const ACTIVATION: &str = "relu";

impl Checkpoint {
    pub fn from_model(
        model: &MlpModel,
        train_config: Option<&TrainConfig>,
        seed: Option<u64>,
        final_val_accuracy: Option<f64>,
    ) -> Self {
        Self {
            layer_dims: model.layer_dims(),
            weights: model
                .layers()
                .iter()
                .map(|l| l.weights.outer_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: model.layers().iter().map(|l| l.bias.to_vec()).collect(),
            activation: ACTIVATION.to_string(),
            train_config: train_config.cloned(),
            seed,
            final_val_accuracy: final_val_accuracy.filter(|v| v.is_finite()),
        }
    }

    pub fn to_model(&self) -> Result<MlpModel> {
        if self.activation != ACTIVATION {
            return Err(Error::InvalidInput(format!(
                "unsupported activation {:?}",
                self.activation
            )));
        }
        if self.weights.len() != self.biases.len()
            || self.layer_dims.len() != self.weights.len() + 1
        {
            return Err(Error::shape("checkpoint layer counts disagree"));
        }
        let mut layers = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            if w.len() != fan_in || w.iter().any(|r| r.len() != fan_out) || b.len() != fan_out {
                return Err(Error::shape(format!("checkpoint layer {l} has wrong shape")));
            }
            let flat: Vec<f64> = w.iter().flatten().copied().collect();
            layers.push(Dense {
                weights: Array2::from_shape_vec((fan_in, fan_out), flat)
                    .map_err(|e| Error::shape(e.to_string()))?,
                bias: Array1::from(b.clone()),
            });
        }
        MlpModel::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_json(path)
    }
}
