//! Bag-level training loop with early stopping on validation loss.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{cka, total_loss, Architecture, DeepQuantifier};
use crate::data::Bag;
use crate::diffcore::{Adam, Graph, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{differentiable_loss, LossKind};
use crate::protocols::{stream_rng, TrainingStream};

/// RNG stream reserved for dropout masks.
const DROPOUT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Bags per optimizer step; gradients are averaged.
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig { lr: 1e-3, max_epochs: 5000, patience: 40, batch_size: 1, loss: LossKind::Rae, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub cka_term: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    /// A loss or likelihood went non-finite; the best earlier parameters were kept.
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    /// APP bags drawn over the whole run (0 in the U setting).
    pub app_bags: usize,
    pub steps: u64,
}

impl TrainingHistory {
    /// `epoch,train_loss,val_loss,cka_term` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,cka_term\n");
        for r in &self.epochs {
            writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.cka_term).unwrap();
        }
        s
    }
}

/// Mean eval-mode loss over labeled bags.
pub fn validation_loss(model: &DeepQuantifier, bags: &[Bag], loss: LossKind) -> Result<f64> {
    let mut total = 0.0;
    for (i, bag) in bags.iter().enumerate() {
        let p = bag
            .prevalence
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("validation bag {} has no prevalence label", i)))?;
        let q = model.quantify(&bag.features)?;
        total += loss.evaluate(p.as_slice(), q.as_slice(), bag.size());
    }
    Ok(total / bags.len() as f64)
}

/// Trains `model` in place on bags from `stream`, keeping the parameters with
/// the lowest validation loss.
pub fn train(
    model: &mut DeepQuantifier,
    stream: &mut TrainingStream,
    val_bags: &[Bag],
    cfg: &TrainerConfig,
) -> Result<TrainingHistory> {
    if val_bags.is_empty() {
        return Err(Error::Config("training needs at least one validation bag".into()));
    }
    if cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::Config(format!("invalid trainer settings: batch_size {}, lr {}", cfg.batch_size, cfg.lr)));
    }
    let lambda = match model.arch() {
        Architecture::Gmnet if model.config.gmnet.spaces >= 2 => model.config.gmnet.cka_lambda,
        _ => 0.0,
    };
    let mut adam = Adam::new(cfg.lr);
    let mut dropout_rng = stream_rng(cfg.seed, DROPOUT_STREAM);
    let mut best_params: Vec<Tensor> = model.params.iter().map(|p| p.tensor.clone()).collect();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut wait = 0usize;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    'outer: for epoch in 0..cfg.max_epochs {
        let bags = stream.epoch(epoch)?;
        let (mut loss_sum, mut cka_sum) = (0.0, 0.0);
        for batch in bags.chunks(cfg.batch_size) {
            let mut grads: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
            for bag in batch {
                let p_true = bag.prevalence.as_ref().expect("training bags carry prevalence labels");
                let mut g = Graph::training();
                let f = match model.forward(&mut g, &bag.features, &mut dropout_rng) {
                    Ok(f) => f,
                    Err(Error::NonFiniteLikelihood { .. }) | Err(Error::NumericOverflow { .. }) => {
                        stop_reason = StopReason::Diverged;
                        break 'outer;
                    }
                    Err(e) => return Err(e),
                };
                let quant = differentiable_loss(&mut g, cfg.loss, p_true.as_slice(), f.prevalence, bag.size());
                let cka_node = (lambda != 0.0).then(|| cka(&mut g, &f.latents));
                let root = total_loss(&mut g, quant, cka_node, lambda);
                let value = g.value(root).item();
                if !value.is_finite() || g.check_finite().is_err() {
                    stop_reason = StopReason::Diverged;
                    break 'outer;
                }
                loss_sum += value;
                if let Some(c) = cka_node {
                    cka_sum += g.value(c).item();
                }
                let gr = g.backward(root);
                for (acc, id) in grads.iter_mut().zip(&f.params) {
                    for (a, v) in acc.data_mut().iter_mut().zip(gr[id].data()) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
            if grads.iter().any(|t| !t.is_finite()) {
                stop_reason = StopReason::Diverged;
                break 'outer;
            }
            let mut tensors: Vec<Tensor> = model.params.iter().map(|p| p.tensor.clone()).collect();
            adam.step(&mut tensors, &grads);
            for (p, t) in model.params.iter_mut().zip(tensors) {
                p.tensor = t;
            }
        }
        debug_assert!(model.covariances_are_pd(), "covariance lost positive definiteness at epoch {}", epoch);

        let val = match validation_loss(model, val_bags, cfg.loss) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFiniteLikelihood { .. }) | Err(Error::NumericOverflow { .. }) => {
                stop_reason = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        let n = bags.len().max(1) as f64;
        epochs.push(EpochRecord { epoch, train_loss: loss_sum / n, val_loss: val, cka_term: cka_sum / n });
        log::debug!("epoch {} train {:.6} val {:.6}", epoch, loss_sum / n, val);
        if val < best_val {
            best_val = val;
            best_epoch = Some(epoch);
            best_params = model.params.iter().map(|p| p.tensor.clone()).collect();
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    if stop_reason == StopReason::Diverged {
        log::warn!("training diverged; keeping the best parameters seen");
    }
    for (p, t) in model.params.iter_mut().zip(best_params) {
        p.tensor = t;
    }
    Ok(TrainingHistory {
        epochs,
        best_epoch,
        best_val_loss: best_val,
        stop_reason,
        app_bags: stream.app_generated(),
        steps: adam.state().step,
    })
}
