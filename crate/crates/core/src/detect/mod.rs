//! Mahalanobis-distance detection of adversarial inputs and the latent-shift
//! statistic.
//!
//! Hidden features of the target classifier are modelled as class-conditional
//! Gaussians sharing one covariance. An input's score at a layer is the
//! negative squared Mahalanobis distance to its closest class mean, and a
//! logistic regression over the per-layer scores separates adversarial
//! inputs from clean and slightly noisy ones.

mod gaussian;
mod logistic;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use gaussian::{fit_class_gaussians, fit_features, GaussianClassStats};
pub use logistic::{auroc, DetectorModel};

use crate::blackbox::ToyClassifier;
use crate::diffcore::Tensor;
use crate::domain::Bounds;
use crate::error::{Error, Result};
use crate::flow::FlowModel;

/// Covariance ridges tried during cross-validated selection.
pub const RIDGE_GRID: [f64; 3] = [1e-3, 1e-2, 1e-1];
pub const CV_FOLDS: usize = 3;

/// Per-layer scores of clean, noisy and adversarial inputs with a
/// train/eval split.
#[derive(Clone, Debug)]
pub struct DetectionDataset {
    /// `(m, layers)` Mahalanobis scores.
    pub features: Tensor,
    /// True for adversarial rows, false for clean and noisy rows.
    pub adversarial: Vec<bool>,
    pub train_idx: Vec<usize>,
    pub eval_idx: Vec<usize>,
    pub n_clean: usize,
    pub n_noisy: usize,
    pub n_adversarial: usize,
}

impl DetectionDataset {
    /// Assembles a dataset from precomputed score rows and splits it,
    /// sending `train_frac` of the rows to the training split.
    pub fn from_scores<R: Rng + ?Sized>(
        clean: Tensor,
        noisy: Tensor,
        adversarial: Tensor,
        train_frac: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(Error::contract(format!(
                "train fraction {train_frac} must lie in (0, 1)"
            )));
        }
        let (n_clean, n_noisy, n_adversarial) = (clean.rows(), noisy.rows(), adversarial.rows());
        let features = Tensor::concat_rows(&[clean, noisy, adversarial])?;
        let m = features.rows();
        let mut labels = vec![false; n_clean + n_noisy];
        labels.resize(m, true);
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(rng);
        let n_train = ((m as f64 * train_frac).round() as usize).clamp(1, m.saturating_sub(1));
        let mut train_idx = order[..n_train].to_vec();
        let mut eval_idx = order[n_train..].to_vec();
        train_idx.sort_unstable();
        eval_idx.sort_unstable();
        Ok(Self {
            features,
            adversarial: labels,
            train_idx,
            eval_idx,
            n_clean,
            n_noisy,
            n_adversarial,
        })
    }

    fn rows(&self, idx: &[usize]) -> (Tensor, Vec<bool>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.adversarial[i]).collect(),
        )
    }

    pub fn train_split(&self) -> (Tensor, Vec<bool>) {
        self.rows(&self.train_idx)
    }

    pub fn eval_split(&self) -> (Tensor, Vec<bool>) {
        self.rows(&self.eval_idx)
    }
}

/// Adds `N(0, std^2)` noise and clips to `bounds`.
pub fn noisy_copy<R: Rng + ?Sized>(x: &Tensor, std: f64, bounds: Bounds, rng: &mut R) -> Result<Tensor> {
    let noise = Normal::new(0.0, std).map_err(|e| Error::contract(e.to_string()))?;
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = bounds.clip(*v + noise.sample(rng));
    }
    Ok(out)
}

/// Scores of every row of `x` under one fitted layer model per layer.
pub fn layer_scores(clf: &ToyClassifier, stats: &[GaussianClassStats], x: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    let mut cols = Vec::with_capacity(stats.len());
    for s in stats {
        let f = clf.features(x, s.layer)?;
        cols.push(s.scores(&f)?);
    }
    let data = (0..n).flat_map(|r| cols.iter().map(move |c| c[r])).collect();
    Tensor::new(vec![n, stats.len()], data)
}

/// Detection metrics on the evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub accuracy: f64,
    pub n_eval: usize,
}

/// Fits the logistic regression on the training split only.
pub fn train_detector(ds: &DetectionDataset) -> Result<DetectorModel> {
    let (x, y) = ds.train_split();
    DetectorModel::fit(&x, &y)
}

/// AUROC and accuracy at threshold 0.5, using only evaluation rows.
pub fn evaluate_detector(model: &DetectorModel, ds: &DetectionDataset) -> Result<DetectionMetrics> {
    let (x, y) = ds.eval_split();
    let p = model.predict_proba(&x)?;
    let correct = p.iter().zip(&y).filter(|(&pi, &yi)| (pi >= 0.5) == yi).count();
    Ok(DetectionMetrics {
        auroc: auroc(&p, &y)?,
        accuracy: correct as f64 / y.len() as f64,
        n_eval: y.len(),
    })
}

/// Settings of a full detection run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Hidden layers whose features are scored; empty means the penultimate.
    pub layers: Vec<usize>,
    pub noise_std: f64,
    pub train_frac: f64,
    pub ridges: Vec<f64>,
    pub seed: u64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            layers: Vec::new(),
            noise_std: 4.0 / 255.0,
            train_frac: 0.1,
            ridges: RIDGE_GRID.to_vec(),
            seed: 0,
        }
    }
}

/// Detector report for one attack variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub attack_variant: String,
    pub auroc: f64,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub ridge: f64,
}

fn fold_auroc(x: &Tensor, y: &[bool]) -> Result<Option<f64>> {
    let n = y.len();
    let mut total = 0.0;
    for f in 0..CV_FOLDS {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % CV_FOLDS != f);
        let ytr: Vec<bool> = train.iter().map(|&i| y[i]).collect();
        let yte: Vec<bool> = test.iter().map(|&i| y[i]).collect();
        let one_class = |v: &[bool]| v.iter().all(|&b| b) || v.iter().all(|&b| !b);
        if one_class(&ytr) || one_class(&yte) {
            return Ok(None);
        }
        let model = DetectorModel::fit(&x.select_rows(&train), &ytr)?;
        total += auroc(&model.predict_proba(&x.select_rows(&test))?, &yte)?;
    }
    Ok(Some(total / CV_FOLDS as f64))
}

/// Full protocol: fit class Gaussians on `fit_x`, score clean, noisy and
/// adversarial inputs, pick the covariance ridge by cross-validation on the
/// training split and evaluate on the rest.
#[allow(clippy::too_many_arguments)]
pub fn run_detection(
    clf: &ToyClassifier,
    fit_x: &Tensor,
    fit_y: &[usize],
    clean: &Tensor,
    adversarial: &Tensor,
    variant: &str,
    bounds: Bounds,
    cfg: &DetectConfig,
) -> Result<DetectorReport> {
    if clean.rows() == 0 || adversarial.rows() == 0 {
        return Err(Error::contract("detection needs clean and adversarial inputs"));
    }
    if cfg.ridges.is_empty() {
        return Err(Error::contract("empty ridge grid"));
    }
    let layers = if cfg.layers.is_empty() {
        vec![clf.penultimate()]
    } else {
        cfg.layers.clone()
    };
    let mut rng = crate::rng::stream(cfg.seed, "detect");
    let noisy = noisy_copy(clean, cfg.noise_std, bounds, &mut rng)?;
    let split_seed = rng.random::<u64>();
    let build = |ridge: f64| -> Result<DetectionDataset> {
        let stats = layers
            .iter()
            .map(|&l| fit_class_gaussians(clf, fit_x, fit_y, l, ridge))
            .collect::<Result<Vec<_>>>()?;
        DetectionDataset::from_scores(
            layer_scores(clf, &stats, clean)?,
            layer_scores(clf, &stats, &noisy)?,
            layer_scores(clf, &stats, adversarial)?,
            cfg.train_frac,
            &mut crate::rng::stream(split_seed, "split"),
        )
    };
    let mut best: Option<(f64, f64)> = None;
    for &ridge in &cfg.ridges {
        let ds = match build(ridge) {
            Ok(ds) => ds,
            Err(Error::Singular { .. }) => continue,
            Err(e) => return Err(e),
        };
        let (x, y) = ds.train_split();
        let score = fold_auroc(&x, &y)?.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((ridge, score));
        }
    }
    let (ridge, _) = best.ok_or_else(|| Error::Singular {
        ridge: cfg.ridges.iter().cloned().fold(0.0, f64::max),
        condition: f64::INFINITY,
    })?;
    let ds = build(ridge)?;
    let model = train_detector(&ds)?;
    let m = evaluate_detector(&model, &ds)?;
    Ok(DetectorReport {
        attack_variant: variant.to_string(),
        auroc: m.auroc,
        accuracy: m.accuracy,
        n_train: ds.train_idx.len(),
        n_eval: m.n_eval,
        seed: cfg.seed,
        ridge,
    })
}

/// Equal-width histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 || values.is_empty() {
            return Err(Error::contract("histogram needs values and at least one bin"));
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1.0;
        }
        let w = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + w * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            counts[(((v - lo) / w) as usize).min(bins - 1)] += 1;
        }
        Ok(Self { edges, counts })
    }
}

/// Relative latent displacement of adversarial inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentShift {
    pub per_sample: Vec<f64>,
    pub median: f64,
    pub histogram: Histogram,
}

/// `||f^-1(x_adv) - f^-1(x)|| / ||f^-1(x)||` per aligned pair.
pub fn latent_shift(flow: &FlowModel, clean: &Tensor, adversarial: &Tensor) -> Result<LatentShift> {
    if clean.shape() != adversarial.shape() {
        return Err(Error::Shape {
            op: "latent_shift",
            lhs: clean.shape().to_vec(),
            rhs: adversarial.shape().to_vec(),
        });
    }
    if clean.rows() == 0 {
        return Err(Error::contract("latent shift of an empty batch"));
    }
    let zc = flow.encode(clean)?;
    let za = flow.encode(adversarial)?;
    let per_sample = (0..zc.rows())
        .map(|r| {
            let base = zc.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if base == 0.0 {
                return Err(Error::domain(format!("clean latent of row {r} is zero")));
            }
            let diff = zc
                .row(r)
                .iter()
                .zip(za.row(r))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            Ok(diff / base)
        })
        .collect::<Result<Vec<_>>>()?;
    let median = lower_median(&per_sample);
    Ok(LatentShift {
        histogram: Histogram::new(&per_sample, 20)?,
        per_sample,
        median,
    })
}

/// Element of rank `(n - 1) / 2` after sorting.
pub fn lower_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn split_is_disjoint_and_covering() {
        let t = |n| Tensor::zeros(&[n, 1]);
        let ds = DetectionDataset::from_scores(t(10), t(10), t(10), 0.1, &mut stream(0, "t")).unwrap();
        assert_eq!(ds.train_idx.len(), 3);
        let mut all: Vec<usize> = ds.train_idx.iter().chain(&ds.eval_idx).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!(ds.adversarial.iter().filter(|&&a| a).count(), 10);
    }

    #[test]
    fn identity_flow_shift_is_norm_ratio() {
        let flow = FlowModel::identity(3);
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 2.0, -1.0, 0.5, 3.0]).unwrap();
        let s = latent_shift(&flow, &x, &x).unwrap();
        assert!(s.per_sample.iter().all(|&v| v == 0.0));
        let s = latent_shift(&flow, &x, &x.map(|v| 2.0 * v)).unwrap();
        assert!(s.per_sample.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::new(&[0.0, 0.1, 0.5, 1.0, 1.0], 4).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 5);
        assert_eq!(h.counts[3], 2);
    }

    #[test]
    fn lower_median_picks_lower_middle() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), 2.0);
        assert_eq!(lower_median(&[5.0, 1.0, 3.0]), 3.0);
    }
}
