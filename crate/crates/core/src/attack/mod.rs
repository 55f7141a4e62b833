//! Score-based black-box attacks driven by natural evolution strategies.
//!
//! Every attack searches over the mean `mu` of an isotropic Gaussian in some
//! parameter space and maps samples to images through a fixed candidate map:
//! the flow itself for AdvFlow, an elementwise `tanh` box map for NAttack,
//! and a low-resolution flow plus bilinear upsampling for the high-resolution
//! variant. All candidates are projected onto the l-infinity ball around the
//! clean input before they reach the oracle.

mod maps;
mod search;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use maps::{CandidateMap, FlowMap, HighResMap, TanhMap, TANH_SHRINK};
pub use search::{advflow_attack, advflow_highres, greedy_advflow, input_seed, nattack, run_attack, search};

use crate::diffcore::Tensor;
use crate::domain::Bounds;
use crate::error::{Error, Result};

/// Probabilities are floored here before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Which search procedure produced a result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    AdvFlow,
    Greedy,
    HighRes,
    NAttack,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::AdvFlow, Variant::Greedy, Variant::HighRes, Variant::NAttack];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::AdvFlow => "advflow",
            Variant::Greedy => "greedy",
            Variant::HighRes => "highres",
            Variant::NAttack => "nattack",
        }
    }

    /// Whether candidates are produced through a flow.
    pub fn needs_flow(&self) -> bool {
        !matches!(self, Variant::NAttack)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown attack variant {s:?} (advflow, greedy, highres, nattack)"
            ))
        })
    }
}

/// Attack hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub variant: Variant,
    /// Standard deviation of the search distribution.
    pub sigma: f64,
    pub lr: f64,
    /// Candidates drawn per iteration.
    pub population: usize,
    /// Budget on candidate queries; success checks are counted separately.
    pub max_queries: u64,
    pub epsilon: f64,
    /// Candidate-query cadence of the success checks.
    pub check_interval: u64,
    /// Candidates averaged into the mean by the greedy variant.
    pub top_k: usize,
    pub seed: u64,
    pub mu_init_std: f64,
    pub bounds: Bounds,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            variant: Variant::AdvFlow,
            sigma: 0.1,
            lr: 0.02,
            population: 20,
            max_queries: 10_000,
            epsilon: 8.0 / 255.0,
            check_interval: 200,
            top_k: 4,
            seed: 0,
            mu_init_std: 1e-3,
            bounds: Bounds::UNIT,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be non-negative, got {}", self.lr));
        }
        if self.population < 2 {
            return fail(format!("population must be at least 2, got {}", self.population));
        }
        if self.max_queries < self.population as u64 {
            return fail(format!(
                "max queries {} is below the population {}",
                self.max_queries, self.population
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.check_interval == 0 || !self.check_interval.is_multiple_of(self.population as u64) {
            return fail(format!(
                "check interval {} must be a positive multiple of the population {}",
                self.check_interval, self.population
            ));
        }
        if self.variant == Variant::Greedy && !(1..=self.population).contains(&self.top_k) {
            return fail(format!("top-k {} must lie in 1..={}", self.top_k, self.population));
        }
        if !(self.mu_init_std >= 0.0) {
            return fail(format!("mu init std must be non-negative, got {}", self.mu_init_std));
        }
        Ok(())
    }

    /// Number of NES iterations the candidate budget allows.
    pub fn iterations(&self) -> u64 {
        self.max_queries / self.population as u64
    }
}

/// Outcome of attacking one input.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub variant: Variant,
    pub success: bool,
    /// Candidate queries spent (population times completed iterations).
    pub queries: u64,
    /// Success-check queries, one per check.
    pub checks: u64,
    pub iterations: u64,
    /// Adversarial example shaped like the clean input; present iff `success`.
    pub example: Option<Tensor>,
    /// Mean C&W loss of every iteration's population.
    pub loss_trace: Vec<f64>,
    /// Iterations whose losses were all equal, giving a zero NES step.
    pub flat_iterations: Vec<u64>,
    /// l-infinity distance of the example from the clean input.
    pub linf: Option<f64>,
}

impl AttackResult {
    /// All oracle queries, candidates and checks together.
    pub fn oracle_queries(&self) -> u64 {
        self.queries + self.checks
    }

    pub fn record(&self, index: usize, seed: u64, clean_correct: bool) -> AttackRecord {
        AttackRecord {
            index,
            variant: self.variant,
            success: self.success,
            queries: self.queries,
            oracle_queries: self.oracle_queries(),
            linf: self.linf,
            seed,
            clean_correct,
        }
    }
}

/// One line of an attack result stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub index: usize,
    pub variant: Variant,
    pub success: bool,
    pub queries: u64,
    pub oracle_queries: u64,
    pub linf: Option<f64>,
    pub seed: u64,
    /// Whether the target classified the clean input correctly.
    pub clean_correct: bool,
}

/// Serializes records as newline-terminated JSON objects.
pub fn write_records(records: &[AttackRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::contract(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a record stream, reporting the offending line on failure.
pub fn read_records(text: &str) -> Result<Vec<AttackRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Config(format!("record line {}: {e}", i + 1))))
        .collect()
}

/// Untargeted C&W loss `max(0, ln p_y - max_{c != y} ln p_c)` with
/// probabilities floored at [`LOG_FLOOR`].
///
/// Zero exactly when some other class reaches the true class's probability.
pub fn cw_loss(probs: &[f64], y: usize) -> Result<f64> {
    if y >= probs.len() {
        return Err(Error::contract(format!(
            "label {y} out of range for {} classes",
            probs.len()
        )));
    }
    if probs.len() < 2 {
        return Err(Error::contract("C&W loss needs at least two classes"));
    }
    let ln = |p: f64| p.max(LOG_FLOOR).ln();
    let other = probs
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != y)
        .map(|(_, &p)| ln(p))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((ln(probs[y]) - other).max(0.0))
}

/// C&W losses of every row of an `(n, k)` probability batch.
pub fn cw_losses(probs: &Tensor, y: usize) -> Result<Vec<f64>> {
    (0..probs.rows()).map(|r| cw_loss(probs.row(r), y)).collect()
}

/// A normalized NES step direction.
#[derive(Clone, Debug, PartialEq)]
pub struct NesStep {
    pub gradient: Vec<f64>,
    /// True when all losses were equal and the step is zero.
    pub flat: bool,
}

fn check_population(losses: &[f64], eps: &Tensor) -> Result<()> {
    if losses.len() < 2 {
        return Err(Error::contract("NES needs at least two samples"));
    }
    if eps.shape().len() != 2 || eps.rows() != losses.len() {
        return Err(Error::contract(format!(
            "{} losses but noise of shape {:?}",
            losses.len(),
            eps.shape()
        )));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::numeric("non-finite loss in NES population"));
    }
    Ok(())
}

/// `(1/n) sum_k Lhat_k eps_k` with losses standardized by their mean and
/// population standard deviation.
pub fn nes_gradient(losses: &[f64], eps: &Tensor) -> Result<NesStep> {
    check_population(losses, eps)?;
    let n = losses.len() as f64;
    let d = eps.cols();
    let (lo, hi) = losses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &l| (a.min(l), b.max(l)));
    let mean = losses.iter().sum::<f64>() / n;
    let std = (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
    if lo == hi || std <= 1e-12 * (1.0 + mean.abs()) {
        return Ok(NesStep {
            gradient: vec![0.0; d],
            flat: true,
        });
    }
    let mut g = vec![0.0; d];
    for (k, &l) in losses.iter().enumerate() {
        let w = (l - mean) / std / n;
        for (gi, e) in g.iter_mut().zip(eps.row(k)) {
            *gi += w * e;
        }
    }
    Ok(NesStep {
        gradient: g,
        flat: false,
    })
}

/// Unnormalized estimator `(1/(n sigma)) sum_k L_k eps_k` of the gradient of
/// the Gaussian-smoothed loss.
pub fn nes_raw_estimate(losses: &[f64], eps: &Tensor, sigma: f64) -> Result<Vec<f64>> {
    check_population(losses, eps)?;
    if !(sigma > 0.0) {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    let scale = 1.0 / (losses.len() as f64 * sigma);
    let mut g = vec![0.0; eps.cols()];
    for (k, &l) in losses.iter().enumerate() {
        for (gi, e) in g.iter_mut().zip(eps.row(k)) {
            *gi += scale * l * e;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn cw_loss_examples() {
        assert_eq!(cw_loss(&[0.0, 1.0], 0).unwrap(), 0.0);
        assert_eq!(cw_loss(&[0.25; 4], 2).unwrap(), 0.0);
        let l = cw_loss(&[0.9, 0.1], 0).unwrap();
        assert!((l - (0.9f64.ln() - 0.1f64.ln())).abs() < 1e-12);
        assert!((l - 2.1972).abs() < 1e-4);
        assert!(cw_loss(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn cw_loss_uses_floor() {
        let l = cw_loss(&[1.0, 0.0], 0).unwrap();
        assert!((l - (-LOG_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn equal_losses_give_exact_zero_step() {
        let eps = Tensor::randn(&[20, 5], 1.0, &mut stream(0, "t"));
        let step = nes_gradient(&[0.1; 20], &eps).unwrap();
        assert!(step.flat);
        assert!(step.gradient.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn config_validation() {
        let ok = AttackConfig::default();
        ok.validate().unwrap();
        for bad in [
            AttackConfig {
                sigma: 0.0,
                ..ok.clone()
            },
            AttackConfig {
                population: 1,
                ..ok.clone()
            },
            AttackConfig {
                max_queries: 10,
                ..ok.clone()
            },
            AttackConfig {
                epsilon: 0.0,
                ..ok.clone()
            },
            AttackConfig {
                check_interval: 30,
                ..ok.clone()
            },
            AttackConfig {
                variant: Variant::Greedy,
                top_k: 21,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("pgd".parse::<Variant>().is_err());
    }

    #[test]
    fn records_round_trip() {
        let r = AttackRecord {
            index: 3,
            variant: Variant::NAttack,
            success: false,
            queries: 10_000,
            oracle_queries: 10_051,
            linf: None,
            seed: 9,
            clean_correct: true,
        };
        let text = write_records(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(read_records(&text).unwrap(), vec![r.clone(), r]);
        assert!(text.contains("\"variant\":\"nattack\""));
    }
}
