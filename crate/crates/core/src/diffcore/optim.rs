use std::collections::HashMap;

use super::params::{GradMap, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
///
/// Frozen parameters are skipped. Moment buffers are created lazily per
/// parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.iter().filter(|e| e.trainable).map(|e| e.name.clone()).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let current = params.get(&name).expect("listed above");
            if current.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: current.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let n = current.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut next = current.data().to_vec();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                next[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * next[i]);
            }
            let next = Tensor::new(current.shape().to_vec(), next)
                .map_err(|e| e.in_context(format!("adam update of {name}")))?;
            params.set(&name, next)?;
        }
        Ok(())
    }
}

/// Exponential decay from `start` to `end` over `total` steps.
pub fn exponential_lr(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let frac = step.min(total - 1) as f64 / (total - 1) as f64;
    start * (end / start).powf(frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(1.0), true).unwrap();
        ps.insert("q", Tensor::scalar(1.0), false).unwrap();
        let mut g = GradMap::default();
        g.insert("w".into(), Tensor::scalar(5.0));
        g.insert("q".into(), Tensor::scalar(5.0));
        let mut opt = Adam::new(0.0);
        opt.step(&mut ps, &g, 0.1).unwrap();
        let w = ps.get("w").unwrap().item().unwrap();
        assert!((w - 0.9).abs() < 1e-6);
        assert_eq!(ps.get("q").unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(exponential_lr(1e-4, 1e-6, 0, 100), 1e-4);
        assert!((exponential_lr(1e-4, 1e-6, 99, 100) - 1e-6).abs() < 1e-18);
    }
}
