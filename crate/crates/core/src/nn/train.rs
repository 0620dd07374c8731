use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grads, LossSpec};
use super::mixup::mixup_batch;
use super::model::{Dense, MlpModel};
use crate::data::{Dataset, SplitTag};
use crate::distill::KdTerms;
use crate::error::{Error, Result};
use crate::prob::rowwise_argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Epochs at whose start the learning rate is multiplied by `lr_decay_factor`.
    #[serde(default)]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    /// Beta parameter of mixup; 0 disables it.
    #[serde(default)]
    pub mixup_alpha: f64,
}

fn default_decay_factor() -> f64 {
    0.1
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    /// 60 epochs, batch 64, lr 0.1 decayed 10x at epochs 35 and 50, momentum 0.9.
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr0: 0.1,
            lr_decay_epochs: vec![35, 50],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-5,
            seed: 0,
            mixup_alpha: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return bad(format!("mixup_alpha {} must be >= 0", self.mixup_alpha));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad("lr_decay_factor must be positive".into());
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_decay_epochs must be strictly increasing".into());
        }
        if self.lr_decay_epochs.iter().any(|&e| e >= self.epochs) {
            return bad("lr_decay_epochs must be below epochs".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr0 * self.lr_decay_factor.powi(decays as i32)
    }
}

/// What the training split is fitted to.
#[derive(Debug, Clone)]
pub enum Objective {
    HardCe,
    /// One target distribution per training row, in training-split order.
    SoftCe(Array2<f64>),
    /// Distillation: teacher probabilities per training row, already at the
    /// distillation temperature.
    Kd {
        teacher_probs: Array2<f64>,
        terms: KdTerms,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_accuracy)
    }
}

/// A training run that hit a non-finite value. Carries the last parameters
/// that were finite and the log up to the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Box<MlpModel>,
    pub log: TrainLog,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted after {} epochs: {}", self.log.epochs.len(), self.error)
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        match f.error {
            Error::Numerical { stage, message } => Error::Numerical {
                stage: format!("train/{stage}"),
                message,
            },
            other => other,
        }
    }
}

/// SGD with heavy-ball momentum: `v = mu v + g; theta -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Dense>,
}

impl Sgd {
    pub fn new(model: &MlpModel, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: model
                .layers()
                .iter()
                .map(|l| Dense::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
        }
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &[Dense], lr: f64) {
        for ((layer, v), g) in model.layers_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            v.weights.zip_mut_with(&g.weights, |v, &g| *v = self.momentum * *v + g);
            v.bias.zip_mut_with(&g.bias, |v, &g| *v = self.momentum * *v + g);
            layer.weights.scaled_add(-lr, &v.weights);
            layer.bias.scaled_add(-lr, &v.bias);
        }
    }
}

fn val_accuracy(model: &MlpModel, features: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(f64::NAN);
    }
    let logits = model.forward_raw(features.view())?;
    let hits = rowwise_argmax(logits.view())
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mini-batch SGD over the training split, evaluating on the validation
/// split after every epoch. Deterministic for a fixed `config.seed`.
pub fn train(
    init: MlpModel,
    data: &Dataset,
    config: &TrainConfig,
    objective: &Objective,
) -> Result<(MlpModel, TrainLog), TrainFailure> {
    let mut log = TrainLog::default();
    let fail = |error: Error, model: &MlpModel, log: &TrainLog| TrainFailure {
        error,
        last_good: Box::new(model.clone()),
        log: log.clone(),
    };
    if let Err(e) = config.validate() {
        return Err(fail(e, &init, &log));
    }
    if init.input_dim() != data.dim() || init.num_classes() != data.k() {
        let e = Error::shape(format!(
            "model {:?} does not fit data with {} features and {} classes",
            init.layer_dims(),
            data.dim(),
            data.k()
        ));
        return Err(fail(e, &init, &log));
    }

    let train = data.split(SplitTag::Train);
    let val = data.split(SplitTag::Val);
    let n = train.indices.len();
    let targets_len = match objective {
        Objective::HardCe => n,
        Objective::SoftCe(t) => t.nrows(),
        Objective::Kd { teacher_probs, .. } => teacher_probs.nrows(),
    };
    if targets_len != n {
        let e = Error::shape(format!("{targets_len} targets for {n} training rows"));
        return Err(fail(e, &init, &log));
    }
    if config.mixup_alpha > 0.0 && matches!(objective, Objective::Kd { .. }) {
        let e = Error::Config("mixup is a teacher-training option; not supported with KD".into());
        return Err(fail(e, &init, &log));
    }
    let one_hot = (config.mixup_alpha > 0.0 && matches!(objective, Objective::HardCe))
        .then(|| train.labels.one_hot());

    let mut model = init;
    let mut opt = Sgd::new(&model, config.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let x = train.features.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels.get(i)).collect();
            let result = match (objective, &one_hot) {
                (Objective::HardCe, Some(one_hot)) => {
                    let t = one_hot.select(Axis(0), batch);
                    mixup_batch(x.view(), t.view(), config.mixup_alpha, &mut rng).and_then(
                        |(mx, mt)| {
                            loss_and_grads(
                                &model,
                                mx.view(),
                                &y,
                                &LossSpec::SoftCe(mt.view()),
                                config.weight_decay,
                            )
                        },
                    )
                }
                (Objective::HardCe, None) => {
                    loss_and_grads(&model, x.view(), &y, &LossSpec::HardCe, config.weight_decay)
                }
                (Objective::SoftCe(all), _) => {
                    let t = all.select(Axis(0), batch);
                    loss_and_grads(&model, x.view(), &y, &LossSpec::SoftCe(t.view()), config.weight_decay)
                }
                (Objective::Kd { teacher_probs, terms }, _) => {
                    let p = teacher_probs.select(Axis(0), batch);
                    let spec = LossSpec::KdComposite {
                        teacher_probs: p.view(),
                        terms: *terms,
                    };
                    loss_and_grads(&model, x.view(), &y, &spec, config.weight_decay)
                }
            };
            let (loss, grads) = match result {
                Ok(v) => v,
                Err(e) => return Err(fail(e, &model, &log)),
            };
            if grads
                .iter()
                .any(|g| g.weights.iter().chain(g.bias.iter()).any(|v| !v.is_finite()))
            {
                let e = Error::numerical("gradient", format!("non-finite gradient in epoch {epoch}"));
                return Err(fail(e, &model, &log));
            }
            let previous = model.clone();
            opt.step(&mut model, &grads, lr);
            if !model.is_finite() {
                let e = Error::numerical("update", format!("non-finite parameters in epoch {epoch}"));
                return Err(fail(e, &previous, &log));
            }
            loss_sum += loss;
            batches += 1;
        }
        let val_accuracy = match val_accuracy(&model, &val.features, val.labels.as_slice()) {
            Ok(v) => v,
            Err(e) => return Err(fail(e, &model, &log)),
        };
        log.epochs.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            val_accuracy,
        });
    }
    Ok((model, log))
}
