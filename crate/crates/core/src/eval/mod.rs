//! Experiment metrics: success rates and query statistics on the
//! mutually-successful set, transfer matrices, the first-order latent
//! perturbation check and perturbation correlation structure.

mod covariance;
mod lemma;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use covariance::{mean_abs_offdiag_corr, perturbation_covariance, CovarianceSummary, MIN_SAMPLES, TOP_COORDS};
pub use lemma::{jacobian, lemma1_check, numeric_jacobian, LemmaRow};

use crate::attack::AttackRecord;
use crate::blackbox::{argmax_rows, ProbabilityModel};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Summary of one attack variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub attempted: usize,
    /// Successes over all attacked inputs.
    pub success_rate: f64,
    /// Successes over inputs the target classified correctly.
    pub success_rate_correct: Option<f64>,
    /// Mean candidate queries over the mutually-successful set.
    pub mean_queries: Option<f64>,
    /// Lower median of the same queries.
    pub median_queries: Option<u64>,
}

/// Query statistics across variants attacked on identical inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub variants: Vec<VariantSummary>,
    /// Inputs every variant attacked successfully.
    pub intersection: Vec<usize>,
    /// True when no input was broken by every variant; query statistics are then absent.
    pub intersection_empty: bool,
}

fn lower_median_u64(v: &mut [u64]) -> Option<u64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    Some(v[(v.len() - 1) / 2])
}

/// Success rates and query statistics, computing averages and medians
/// only over inputs every variant broke.
pub fn query_stats(runs: &[(String, Vec<AttackRecord>)]) -> Result<ExperimentReport> {
    if runs.is_empty() {
        return Err(Error::contract("query statistics need at least one variant"));
    }
    let index_set = |r: &[AttackRecord]| r.iter().map(|x| x.index).collect::<BTreeSet<_>>();
    let reference = index_set(&runs[0].1);
    for (name, recs) in runs {
        if index_set(recs) != reference || recs.len() != reference.len() {
            return Err(Error::contract(format!(
                "variant {name} was not run on the same distinct inputs as {}",
                runs[0].0
            )));
        }
    }
    let intersection: BTreeSet<usize> = reference
        .iter()
        .copied()
        .filter(|i| {
            runs.iter()
                .all(|(_, recs)| recs.iter().any(|r| r.index == *i && r.success))
        })
        .collect();
    let variants = runs
        .iter()
        .map(|(name, recs)| {
            let n = recs.len();
            let wins = recs.iter().filter(|r| r.success).count();
            let correct: Vec<&AttackRecord> = recs.iter().filter(|r| r.clean_correct).collect();
            let success_rate_correct = (!correct.is_empty())
                .then(|| correct.iter().filter(|r| r.success).count() as f64 / correct.len() as f64);
            let mut q: Vec<u64> = recs
                .iter()
                .filter(|r| intersection.contains(&r.index))
                .map(|r| r.queries)
                .collect();
            let mean_queries = (!q.is_empty()).then(|| q.iter().sum::<u64>() as f64 / q.len() as f64);
            VariantSummary {
                name: name.clone(),
                attempted: n,
                success_rate: if n == 0 { 0.0 } else { wins as f64 / n as f64 },
                success_rate_correct,
                mean_queries,
                median_queries: lower_median_u64(&mut q),
            }
        })
        .collect();
    Ok(ExperimentReport {
        variants,
        intersection_empty: intersection.is_empty(),
        intersection: intersection.into_iter().collect(),
    })
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::contract(e.to_string()))
    }

    /// Plain-text table with one row per variant.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>9} {:>10} {:>12} {:>10} {:>10}",
            "variant", "attempted", "success%", "success%(cc)", "avg q", "median q"
        );
        for v in &self.variants {
            let opt = |x: Option<String>| x.unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<10} {:>9} {:>10.2} {:>12} {:>10} {:>10}",
                v.name,
                v.attempted,
                100.0 * v.success_rate,
                opt(v.success_rate_correct.map(|r| format!("{:.2}", 100.0 * r))),
                opt(v.mean_queries.map(|q| format!("{q:.1}"))),
                opt(v.median_queries.map(|q| q.to_string())),
            );
        }
        let _ = writeln!(
            s,
            "mutually successful inputs: {}{}",
            self.intersection.len(),
            if self.intersection_empty { " (empty)" } else { "" }
        );
        s
    }
}

/// Adversarial examples crafted against one source model.
pub struct TransferSource<'a> {
    pub name: String,
    /// `(m, ...)` successful adversarial examples.
    pub adversaries: &'a Tensor,
    pub labels: &'a [usize],
    /// Inputs attacked on the source, successful or not.
    pub attempted: usize,
}

/// Success rates in percent; rows are sources, columns targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub percent: Vec<Vec<f64>>,
}

/// Entry `(i, j)` is the share of source `i`'s attempted inputs whose
/// adversary is misclassified by target `j`.
///
/// Using the attempted count as denominator makes the diagonal equal each
/// source's own success rate when the target is the source.
pub fn transferability(
    sources: &[TransferSource<'_>],
    targets: &[(String, &dyn ProbabilityModel)],
) -> Result<TransferMatrix> {
    let mut percent = Vec::with_capacity(sources.len());
    for s in sources {
        if s.adversaries.rows() != s.labels.len() || s.labels.len() > s.attempted {
            return Err(Error::contract(format!(
                "source {}: {} adversaries, {} labels, {} attempts",
                s.name,
                s.adversaries.rows(),
                s.labels.len(),
                s.attempted
            )));
        }
        let mut row = Vec::with_capacity(targets.len());
        for (_, model) in targets {
            let fooled = if s.labels.is_empty() {
                0
            } else {
                let pred = argmax_rows(&model.probabilities(s.adversaries)?);
                pred.iter().zip(s.labels).filter(|(p, y)| p != y).count()
            };
            row.push(if s.attempted == 0 {
                0.0
            } else {
                100.0 * fooled as f64 / s.attempted as f64
            });
        }
        percent.push(row);
    }
    Ok(TransferMatrix {
        sources: sources.iter().map(|s| s.name.clone()).collect(),
        targets: targets.iter().map(|t| t.0.clone()).collect(),
        percent,
    })
}

impl TransferMatrix {
    pub fn table(&self) -> String {
        let mut s = format!("{:<12}", "source\\target");
        for t in &self.targets {
            let _ = write!(s, " {t:>10}");
        }
        s.push('\n');
        for (name, row) in self.sources.iter().zip(&self.percent) {
            let _ = write!(s, "{name:<12}");
            for v in row {
                let _ = write!(s, " {v:>10.2}");
            }
            s.push('\n');
        }
        s
    }
}

/// Groups a mixed record stream by variant name, keeping stream order.
pub fn group_by_variant(records: &[AttackRecord]) -> Vec<(String, Vec<AttackRecord>)> {
    let mut groups: BTreeMap<String, Vec<AttackRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.variant.name().to_string()).or_default().push(r.clone());
    }
    groups.into_iter().collect()
}
