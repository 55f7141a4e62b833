//! Query-only classifier access and desk-scale target models.

mod classifier;
mod pgd;

use std::sync::atomic::{AtomicU64, Ordering};

pub use classifier::{
    adversarial_train, train_classifier, AdvTrainConfig, ClassifierConfig, ClassifierReport, ToyClassifier,
    CLASSIFIER_MAGIC,
};
pub use pgd::pgd_attack;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Tolerance on `sum(p) == 1` for every probability vector.
pub const PROB_TOL: f64 = 1e-5;

/// A classifier exposing only class probabilities.
pub trait ProbabilityModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// `(n, k)` class probabilities for a batch of `n` inputs.
    fn probabilities(&self, x: &Tensor) -> Result<Tensor>;
}

type Validator<'m> = Box<dyn Fn(&Tensor) -> Result<()> + Send + Sync + 'm>;

/// Budgeted, counting wrapper around a [`ProbabilityModel`].
///
/// The budget is checked before dispatch: a batch that would push the
/// count past the budget is rejected whole and not counted.
pub struct Oracle<'m> {
    model: &'m dyn ProbabilityModel,
    count: AtomicU64,
    budget: Option<u64>,
    validator: Option<Validator<'m>>,
}

impl<'m> Oracle<'m> {
    pub fn new(model: &'m dyn ProbabilityModel, budget: Option<u64>) -> Self {
        Self {
            model,
            count: AtomicU64::new(0),
            budget,
            validator: None,
        }
    }

    /// Runs `check` on every batch before it reaches the model.
    pub fn with_validator(mut self, check: impl Fn(&Tensor) -> Result<()> + Send + Sync + 'm) -> Self {
        self.validator = Some(Box::new(check));
        self
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    pub fn remaining(&self) -> Option<u64> {
        self.budget.map(|b| b.saturating_sub(self.count()))
    }

    pub fn model(&self) -> &'m dyn ProbabilityModel {
        self.model
    }

    /// Queries class probabilities for a batch, counting one query per row.
    pub fn query(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.rows() as u64;
        if x.cols() != self.model.input_dim() {
            return Err(Error::contract(format!(
                "oracle expects {} features, got shape {:?}",
                self.model.input_dim(),
                x.shape()
            )));
        }
        if let Some(check) = &self.validator {
            check(x)?;
        }
        let budget = self.budget;
        self.count
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |used| match budget {
                Some(b) if used + n > b => None,
                _ => Some(used + n),
            })
            .map_err(|used| Error::Budget {
                used,
                budget: budget.unwrap_or(u64::MAX),
                requested: n,
            })?;
        let p = self.model.probabilities(x)?;
        validate_probabilities(&p, x.rows(), self.model.num_classes())?;
        Ok(p)
    }
}

/// Checks shape, non-negativity and normalization of a probability batch.
pub fn validate_probabilities(p: &Tensor, n: usize, k: usize) -> Result<()> {
    if p.shape() != [n, k] {
        return Err(Error::contract(format!(
            "probabilities have shape {:?}, expected [{n}, {k}]",
            p.shape()
        )));
    }
    for r in 0..n {
        let row = p.row(r);
        let s: f64 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > PROB_TOL {
            return Err(Error::numeric(format!("row {r} is not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

/// Classifier returning the same distribution for every input. Useful as a stub.
pub struct ConstantModel {
    pub dim: usize,
    pub probs: Vec<f64>,
}

impl ConstantModel {
    pub fn uniform(dim: usize, k: usize) -> Self {
        Self {
            dim,
            probs: vec![1.0 / k as f64; k],
        }
    }
}

impl ProbabilityModel for ConstantModel {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn num_classes(&self) -> usize {
        self.probs.len()
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        Tensor::new(vec![n, self.probs.len()], self.probs.repeat(n))
    }
}

/// Predicted classes (first maximum on ties).
pub fn argmax_rows(p: &Tensor) -> Vec<usize> {
    (0..p.rows())
        .map(|r| {
            p.row(r)
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}
