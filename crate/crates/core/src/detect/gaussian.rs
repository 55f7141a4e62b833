use nalgebra::{DMatrix, DVector};

use crate::blackbox::{ProbabilityModel, ToyClassifier};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Condition numbers above this are treated as singular.
const MAX_CONDITION: f64 = 1e12;

/// Class means with one shared, ridge-regularized covariance.
#[derive(Clone, Debug)]
pub struct GaussianClassStats {
    /// Hidden layer the features come from.
    pub layer: usize,
    pub ridge: f64,
    pub means: Vec<DVector<f64>>,
    pub covariance: DMatrix<f64>,
    /// Lower Cholesky factor of `covariance`.
    chol_l: DMatrix<f64>,
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let ev = m.clone().symmetric_eigenvalues();
    let (lo, hi) = ev
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v.abs()), b.max(v.abs())));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Fits tied-covariance class Gaussians to `(n, d)` features.
///
/// Every class in `0..num_classes` needs at least two samples.
pub fn fit_features(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    ridge: f64,
    layer: usize,
) -> Result<GaussianClassStats> {
    if !(ridge > 0.0) {
        return Err(Error::contract(format!("ridge must be positive, got {ridge}")));
    }
    let (n, d) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(Error::contract(format!("{n} feature rows but {} labels", labels.len())));
    }
    let mut counts = vec![0usize; num_classes];
    let mut means = vec![DVector::<f64>::zeros(d); num_classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::contract(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        counts[y] += 1;
        means[y] += DVector::from_row_slice(features.row(r));
    }
    if let Some(c) = counts.iter().position(|&c| c < 2) {
        return Err(Error::contract(format!(
            "class {c} has {} samples; need at least 2",
            counts[c]
        )));
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        *m /= c as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (r, &y) in labels.iter().enumerate() {
        let v = DVector::from_row_slice(features.row(r)) - &means[y];
        cov.ger(1.0, &v, &v, 1.0);
    }
    cov /= n as f64;
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    let singular = |cov: &DMatrix<f64>| Error::Singular {
        ridge,
        condition: condition(cov),
    };
    let cond = condition(&cov);
    if !(cond <= MAX_CONDITION) {
        return Err(singular(&cov));
    }
    let chol = cov.clone().cholesky().ok_or_else(|| singular(&cov))?;
    Ok(GaussianClassStats {
        layer,
        ridge,
        means,
        chol_l: chol.l(),
        covariance: cov,
    })
}

/// Fits class Gaussians to the hidden features of `clf` at `layer`.
pub fn fit_class_gaussians(
    clf: &ToyClassifier,
    x: &Tensor,
    labels: &[usize],
    layer: usize,
    ridge: f64,
) -> Result<GaussianClassStats> {
    let f = clf.features(x, layer)?;
    fit_features(&f, labels, clf.num_classes(), ridge, layer)
}

impl GaussianClassStats {
    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// Squared Mahalanobis distance of `v` to class `c`.
    pub fn distance2(&self, v: &[f64], c: usize) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::contract(format!(
                "feature of length {} scored against {}-dimensional stats",
                v.len(),
                self.dim()
            )));
        }
        let diff = DVector::from_row_slice(v) - &self.means[c];
        let w = self
            .chol_l
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::numeric("triangular solve failed"))?;
        Ok(w.norm_squared())
    }

    /// `-min_c d^2(v, mu_c)`; at most zero, zero only at a class mean.
    pub fn score(&self, v: &[f64]) -> Result<f64> {
        let mut best = f64::INFINITY;
        for c in 0..self.means.len() {
            best = best.min(self.distance2(v, c)?);
        }
        Ok(-best)
    }

    /// Scores of every row of `(n, d)` features.
    pub fn scores(&self, features: &Tensor) -> Result<Vec<f64>> {
        (0..features.rows()).map(|r| self.score(features.row(r))).collect()
    }
}
