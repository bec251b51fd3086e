//! Binary cross-entropy training with Adam and per-epoch history.
//!
//! Each batch item runs forward and backward on its own tape; item results
//! are reduced in index order (fixed-order gradient summation), so training
//! is seed-reproducible regardless of how many worker threads run the
//! items.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPipeline;
use crate::datakit::{DatasetSplit, LabeledExample};
use crate::error::{Error, Result};
use crate::exec;
use crate::imageio::Image;
use crate::metrics;
use crate::network::{ForwardMode, Model};
use crate::rng::{self, tag};
use crate::tensor::{Tensor, BCE_EPSILON};

/// Hyperparameters of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Redraw augmentation parameters every epoch; with `false` each image
    /// keeps the single augmented variant drawn at epoch zero.
    pub augment_online: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            shuffle: true,
            augment_online: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Parameter(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Parameter(format!("{name} {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// One epoch's train/validation loss and accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// One Adam update on a parameter slice.
///
/// `t` is the 1-based step count already including this step; `m` and `v`
/// are the running first and second moments, updated in place.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// Adam state over a model's parameters, skipping frozen layers.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Apply one step from per-parameter gradients keyed by parameter id.
    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for layer {id:?}; training aborted"
                )));
            }
        }
        self.t += 1;
        let frozen: std::collections::BTreeSet<String> = model
            .param_ids()
            .into_iter()
            .filter(|id| model.is_param_frozen(id))
            .collect();
        for p in model.params_mut() {
            if frozen.contains(&p.id) {
                continue;
            }
            let Some(g) = grads.get(&p.id) else {
                continue;
            };
            let numel = p.value.numel();
            let (m, v) = self
                .moments
                .entry(p.id.clone())
                .or_insert_with(|| (vec![0.0; numel], vec![0.0; numel]));
            adam_update(
                p.value.data_mut(),
                g.data(),
                m,
                v,
                self.t,
                self.lr,
                self.beta1,
                self.beta2,
                self.epsilon,
            );
        }
        Ok(())
    }
}

/// Plain mean binary cross-entropy of probabilities against labels, with
/// the same clamp as the differentiable loss.
pub fn bce_mean(probs: &[f64], labels: &[u8]) -> f64 {
    let n = labels.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

struct ItemResult {
    loss: f64,
    prob: f64,
    grads: Vec<(String, Tensor)>,
}

fn train_item(
    model: &Model,
    example: &LabeledExample,
    pipeline: &AugmentPipeline,
    augment: bool,
    draw_index: u64,
    dropout_seed: u64,
) -> Result<ItemResult> {
    let img = Image::load(&example.path)?;
    let prepared = if augment {
        pipeline.apply(&img, draw_index)?
    } else {
        pipeline.prepare(&img)?
    };
    let tensor = prepared.to_tensor();
    let batch = tensor.reshape(
        [vec![1], tensor.shape().to_vec()].concat(),
    )?;
    let mut pass = model.forward(&batch, ForwardMode::Train { dropout_seed })?;
    let probs = pass.probabilities;
    let loss = pass.tape_mut().bce_loss(probs, &[example.label])?;
    pass.tape_mut().backward(loss)?;

    let mut grads = Vec::new();
    for id in model.param_ids() {
        if model.is_param_frozen(&id) {
            continue;
        }
        let node = pass.param_node(&id).expect("params always registered");
        let g = pass
            .tape()
            .grad(node)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(model.param(&id).unwrap().shape().to_vec()));
        grads.push((id, g));
    }
    Ok(ItemResult {
        loss: pass.tape().value(loss).item()?,
        prob: pass.tape().value(probs).data()[0],
        grads,
    })
}

/// Eval-mode probabilities for a set of examples, in input order.
pub fn evaluate_scores(
    model: &Model,
    examples: &[LabeledExample],
    pipeline: &AugmentPipeline,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let probs: Vec<Result<f64>> = exec::map_indexed(examples.len(), |i| {
        let img = Image::load(&examples[i].path)?;
        let tensor = pipeline.prepare(&img)?.to_tensor();
        let batch = tensor.reshape([vec![1], tensor.shape().to_vec()].concat())?;
        Ok(model.predict(&batch)?.data()[0])
    });
    let probs: Vec<f64> = probs.into_iter().collect::<Result<_>>()?;
    let labels = examples.iter().map(|e| e.label).collect();
    Ok((probs, labels))
}

/// Run the epoch loop; returns one history record per epoch and leaves the
/// model at its final-epoch weights.
///
/// Augmentation (when supplied) applies to training images only; validation
/// always takes the deterministic crop-only path in eval mode.
pub fn train(
    model: &mut Model,
    split: &DatasetSplit,
    augmenter: Option<&AugmentPipeline>,
    config: &TrainConfig,
) -> Result<Vec<HistoryRecord>> {
    config.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Data(format!(
            "training needs nonempty train and validation partitions, got {} / {}",
            split.train.len(),
            split.validation.len()
        )));
    }
    let (in_h, in_w, _) = model.config().input_size;
    if in_h != in_w {
        return Err(Error::Config(format!(
            "image pipeline produces square inputs but the model expects {in_h}x{in_w}"
        )));
    }
    if let Some(p) = augmenter {
        p.validate()?;
        if p.target_size != in_h {
            return Err(Error::Dimension(format!(
                "augmentation target {} does not match model input {in_h}",
                p.target_size
            )));
        }
    }
    let eval_pipeline = AugmentPipeline::crop_only(in_h);
    let mut adam = Adam::new(config);
    let mut history = Vec::with_capacity(config.epochs);
    let n_train = split.train.len();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        if config.shuffle {
            let mut rng = rng::stream(config.seed, &[tag::SHUFFLE, epoch as u64]);
            order.shuffle(&mut rng);
        }

        let mut epoch_losses = Vec::with_capacity(n_train);
        let mut epoch_probs = Vec::with_capacity(n_train);
        let mut epoch_labels = Vec::with_capacity(n_train);

        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<ItemResult>> = exec::map_indexed(chunk.len(), |i| {
                let example_idx = chunk[i];
                let example = &split.train[example_idx];
                let aug_epoch = if config.augment_online { epoch as u64 } else { 0 };
                let draw = rng::derive(aug_epoch, &[example_idx as u64]);
                let dropout_seed = rng::derive(
                    config.seed,
                    &[tag::DROPOUT, epoch as u64, example_idx as u64],
                );
                train_item(
                    model,
                    example,
                    augmenter.unwrap_or(&eval_pipeline),
                    augmenter.is_some(),
                    draw,
                    dropout_seed,
                )
            });

            // Fixed-order reduction keyed by item index.
            let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for (i, result) in results.into_iter().enumerate() {
                let item = result?;
                batch_loss += item.loss;
                epoch_losses.push(item.loss);
                epoch_probs.push(item.prob);
                epoch_labels.push(split.train[chunk[i]].label);
                for (id, g) in item.grads {
                    match grad_acc.get_mut(&id) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            grad_acc.insert(id, g);
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is not finite at epoch {epoch} batch {batch_no}"
                )));
            }
            for g in grad_acc.values_mut() {
                for x in g.data_mut() {
                    *x *= scale;
                }
            }
            adam.step(model, &grad_acc)?;
        }

        let train_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
        let train_conf = metrics::confusion(&epoch_probs, &epoch_labels, metrics::DEFAULT_THRESHOLD)?;
        let (val_probs, val_labels) = evaluate_scores(model, &split.validation, &eval_pipeline)?;
        let val_conf = metrics::confusion(&val_probs, &val_labels, metrics::DEFAULT_THRESHOLD)?;

        history.push(HistoryRecord {
            epoch: epoch + 1,
            train_loss,
            train_acc: metrics::accuracy(&train_conf),
            val_loss: bce_mean(&val_probs, &val_labels),
            val_acc: metrics::accuracy(&val_conf),
        });
    }
    Ok(history)
}

/// Six-decimal fixed-point CSV of the history.
pub fn history_to_csv(history: &[HistoryRecord]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        ));
    }
    out
}

pub fn write_history_csv(history: &[HistoryRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_to_csv(history)).map_err(|e| Error::io(path, e))
}
