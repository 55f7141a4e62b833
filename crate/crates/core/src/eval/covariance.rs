use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Correlations use at most this many highest-variance coordinates.
pub const TOP_COORDS: usize = 16;
/// Fewest perturbations accepted per method.
pub const MIN_SAMPLES: usize = 100;

/// Off-diagonal correlation strength of two perturbation sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSummary {
    pub advflow: f64,
    pub nattack: f64,
    /// `advflow / nattack`.
    pub ratio: f64,
    pub advflow_coords: Vec<usize>,
    pub nattack_coords: Vec<usize>,
    pub samples: usize,
}

/// Mean absolute off-diagonal correlation among the (up to)
/// [`TOP_COORDS`] highest-variance columns of `(n, d)` deltas, with the
/// columns used. Zero-variance columns are never selected.
pub fn mean_abs_offdiag_corr(deltas: &Tensor) -> Result<(f64, Vec<usize>)> {
    let deltas = deltas.clone().flatten_rows();
    let (n, d) = (deltas.rows(), deltas.cols());
    if n < 2 {
        return Err(Error::contract("correlation needs at least two samples"));
    }
    let deltas = &deltas;
    let col = |j: usize| (0..n).map(move |r| deltas.row(r)[j]);
    let means: Vec<f64> = (0..d).map(|j| col(j).sum::<f64>() / n as f64).collect();
    let vars: Vec<f64> = (0..d)
        .map(|j| col(j).map(|v| (v - means[j]).powi(2)).sum::<f64>() / n as f64)
        .collect();
    // Rounding can leave a tiny variance on constant columns, so test spread directly.
    let varies = |j: usize| col(j).any(|v| v != deltas.row(0)[j]);
    let mut order: Vec<usize> = (0..d).filter(|&j| vars[j] > 0.0 && varies(j)).collect();
    order.sort_by(|&a, &b| vars[b].total_cmp(&vars[a]).then(a.cmp(&b)));
    order.truncate(TOP_COORDS);
    if order.len() < 2 {
        return Err(Error::numeric(format!(
            "perturbations have {} coordinates with non-zero variance; need at least 2",
            order.len()
        )));
    }
    order.sort_unstable();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in order.iter().enumerate() {
        for &j in &order[a + 1..] {
            let cov = col(i)
                .zip(col(j))
                .map(|(x, y)| (x - means[i]) * (y - means[j]))
                .sum::<f64>()
                / n as f64;
            total += (cov / (vars[i] * vars[j]).sqrt()).abs();
            pairs += 1;
        }
    }
    Ok((total / pairs as f64, order))
}

/// Compares the correlation structure of AdvFlow and NAttack perturbations.
pub fn perturbation_covariance(advflow: &Tensor, nattack: &Tensor) -> Result<CovarianceSummary> {
    if advflow.cols() != nattack.cols() {
        return Err(Error::contract(format!(
            "perturbation dimensions differ: {} vs {}",
            advflow.cols(),
            nattack.cols()
        )));
    }
    let samples = advflow.rows().min(nattack.rows());
    if samples < MIN_SAMPLES {
        return Err(Error::contract(format!(
            "need at least {MIN_SAMPLES} perturbations per method, got {samples}"
        )));
    }
    let (a, advflow_coords) = mean_abs_offdiag_corr(advflow)?;
    let (b, nattack_coords) = mean_abs_offdiag_corr(nattack)?;
    Ok(CovarianceSummary {
        advflow: a,
        nattack: b,
        ratio: if b > 0.0 { a / b } else { f64::INFINITY },
        advflow_coords,
        nattack_coords,
        samples,
    })
}
