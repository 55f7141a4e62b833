use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Gradient-norm tolerance of the solver.
pub const TOL: f64 = 1e-6;
/// Small L2 penalty keeping separable problems bounded.
pub const L2: f64 = 1e-3;
const MAX_ITERS: usize = 200_000;

/// Logistic regression over standardized detection features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl DetectorModel {
    /// Full-batch gradient descent on the mean log-loss plus `L2/2 ||w||^2`,
    /// run until the gradient norm falls below [`TOL`].
    pub fn fit(x: &Tensor, y: &[bool]) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if y.len() != n || n == 0 {
            return Err(Error::contract(format!("{n} rows but {} labels", y.len())));
        }
        if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
            return Err(Error::contract("detector training data holds a single class"));
        }
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n as f64;
            }
        }
        for r in 0..n {
            for ((s, v), m) in scale.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let z: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                x.row(r)
                    .iter()
                    .zip(&mean)
                    .zip(&scale)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect();
        // Lipschitz bound of the gradient: (sum of squared norms / n + 1) / 4 + L2.
        let lip = (z.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n as f64 + 1.0) / 4.0 + L2;
        let step = 1.0 / lip;
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut iterations = 0;
        loop {
            let mut gw: Vec<f64> = w.iter().map(|wi| L2 * wi).collect();
            let mut gb = 0.0;
            for (row, &t) in z.iter().zip(y) {
                let p = sigmoid(row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b);
                let e = (p - f64::from(u8::from(t))) / n as f64;
                for (g, a) in gw.iter_mut().zip(row) {
                    *g += e * a;
                }
                gb += e;
            }
            let norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
            if norm < TOL || iterations >= MAX_ITERS {
                break;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= step * g;
            }
            b -= step * gb;
            iterations += 1;
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
            bias: b,
            iterations,
        })
    }

    /// Probability that each row is adversarial.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.weights.len() {
            return Err(Error::contract(format!(
                "detector expects {} features, got {}",
                self.weights.len(),
                x.cols()
            )));
        }
        Ok((0..x.rows())
            .map(|r| {
                let t: f64 = x
                    .row(r)
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .zip(&self.weights)
                    .map(|(((v, m), s), w)| (v - m) / s * w)
                    .sum();
                sigmoid(t + self.bias)
            })
            .collect())
    }
}

/// Area under the ROC curve by the Mann-Whitney statistic, counting ties
/// as one half. `labels` marks the positive class.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("NaN detector score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("AUROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}
