use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FlowModel;
use crate::diffcore::{exponential_lr, Adam, Tape, Tensor};
use crate::domain::Bounds;
use crate::error::{Error, Result};

/// Maximum-likelihood training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    /// Std of the Gaussian noise added to every training batch.
    pub dequant_std: f64,
    /// Clip dequantized inputs to this range (needed by logit-input flows).
    pub clip: Option<Bounds>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr_start: 1e-4,
            lr_end: 1e-6,
            weight_decay: 1e-5,
            dequant_std: 0.02,
            clip: None,
        }
    }
}

/// Per-epoch negative log-likelihoods in nats per sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_nll: Vec<f64>,
    /// Held-out NLL before training, then after every epoch.
    pub holdout_nll: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_holdout(&self) -> Option<f64> {
        self.holdout_nll.last().copied()
    }
}

fn holdout_nll(model: &FlowModel, x: &Tensor) -> Result<f64> {
    let lp = model.log_prob(x)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Fits `model` to `data` by minimizing the mean negative log-likelihood.
///
/// Each batch is dequantized with fresh Gaussian noise. A non-finite loss
/// aborts with the epoch and batch index.
pub fn train_mle<R: Rng + ?Sized>(
    model: &mut FlowModel,
    data: &Tensor,
    holdout: Option<&Tensor>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    if data.rows() == 0 || data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    if !(cfg.lr_start > 0.0 && cfg.lr_end > 0.0) {
        return Err(Error::contract("learning rates must be positive"));
    }
    let flat = data.clone().flatten_rows();
    if flat.cols() != model.dim() {
        return Err(Error::contract(format!(
            "flow of dimension {} given data with {} features",
            model.dim(),
            flat.cols()
        )));
    }
    let noise =
        Normal::new(0.0, cfg.dequant_std.max(0.0) + f64::MIN_POSITIVE).map_err(|e| Error::contract(e.to_string()))?;
    let n = flat.rows();
    let batches = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let mut report = TrainReport::default();
    if let Some(h) = holdout {
        report.holdout_nll.push(holdout_nll(model, h)?);
    }
    let mut opt = Adam::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch = flat.select_rows(idx);
            for v in batch.data_mut() {
                *v += noise.sample(rng);
                if let Some(clip) = cfg.clip {
                    *v = clip.clip(*v);
                }
            }
            let tape = Tape::new();
            let x = tape.constant(batch)?;
            let loss = model
                .nll_var(&tape, model.params(), x)
                .map_err(|e| e.in_context(format!("epoch {epoch} batch {b}")))?;
            let value = loss.value().item()?;
            if !value.is_finite() {
                return Err(Error::numeric(format!("non-finite loss at epoch {epoch} batch {b}")));
            }
            let grads = tape.backward(loss)?.for_params(model.params());
            let lr = exponential_lr(cfg.lr_start, cfg.lr_end, report.steps, total);
            opt.step(model.params_mut(), &grads, lr)
                .map_err(|e| e.in_context(format!("epoch {epoch} batch {b}")))?;
            report.steps += 1;
            epoch_sum += value * idx.len() as f64;
        }
        report.train_nll.push(epoch_sum / n as f64);
        if let Some(h) = holdout {
            report.holdout_nll.push(holdout_nll(model, h)?);
        }
    }
    Ok(report)
}
