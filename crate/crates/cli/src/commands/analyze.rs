//! `detect` and `evaluate`: analyses of finished attack runs.

use std::path::{Path, PathBuf};

use flowattack::attack::{read_records, AttackRecord, Variant};
use flowattack::blackbox::{ProbabilityModel, ToyClassifier};
use flowattack::detect::{latent_shift, run_detection, DetectConfig};
use flowattack::diffcore::Tensor;
use flowattack::domain::Bounds;
use flowattack::eval::{
    perturbation_covariance, query_stats, transferability, CovarianceSummary, ExperimentReport, TransferMatrix,
    TransferSource, MIN_SAMPLES,
};
use flowattack::{Error, Result};
use serde::Serialize;

use super::{load_classifier, load_dataset, load_flow, load_tensor, read_text, with_path, write_json};
use crate::config::{key, optional, Key, RunConfig};
use crate::{CommandSpec, Options};

/// Records and per-input outputs of one `attack` run.
struct AttackRun {
    dir: PathBuf,
    variant: Variant,
    records: Vec<AttackRecord>,
    /// One row per record; failed inputs hold the clean input.
    examples: Tensor,
}

impl AttackRun {
    fn load(dir: &Path) -> Result<Self> {
        let rec_path = dir.join("records.jsonl");
        let records = with_path(&rec_path, read_records(&read_text(&rec_path)?))?;
        let examples = load_tensor(&dir.join("adversarial.nftd"))?;
        if examples.rows() != records.len() {
            return Err(Error::Contract(format!(
                "{}: {} records but {} adversarial rows",
                dir.display(),
                records.len(),
                examples.rows()
            )));
        }
        let variant = match records.first() {
            Some(r) if records.iter().all(|s| s.variant == r.variant) => r.variant,
            Some(_) => return Err(Error::Contract(format!("{}: mixed variants in one run", dir.display()))),
            None => return Err(Error::Contract(format!("{}: no attack records", dir.display()))),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            variant,
            records,
            examples,
        })
    }

    /// Record positions of successful attacks, optionally limited to `keep` inputs.
    fn successes(&self, keep: Option<&[usize]>) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&k| {
                self.records[k].success && keep.is_none_or(|s| s.binary_search(&self.records[k].index).is_ok())
            })
            .collect()
    }

    /// `(clean, adversarial)` rows for the given record positions.
    fn pairs(&self, data: &Tensor, positions: &[usize]) -> Result<(Tensor, Tensor)> {
        let idx: Vec<usize> = positions.iter().map(|&k| self.records[k].index).collect();
        if let Some(&bad) = idx.iter().find(|&&i| i >= data.rows()) {
            return Err(Error::Contract(format!(
                "{}: record index {bad} is beyond the {} data rows",
                self.dir.display(),
                data.rows()
            )));
        }
        Ok((data.select_rows(&idx), self.examples.select_rows(positions)))
    }
}

const DETECT_KEYS: &[Key] = &[
    key("classifier", "", "Classifier whose hidden features are scored"),
    key("fit_data", "", "Clean inputs used to fit the class Gaussians"),
    key("fit_labels", "", "Labels of fit_data"),
    key("data", "", "The inputs the attack run was given"),
    key("attack", "", "Directory of an attack run"),
    key("seed", "0", "Global seed (noise and split)"),
    key(
        "noise_std",
        "4/255",
        "Std of the Gaussian noise added to the noisy negatives",
    ),
    key("train_frac", "0.1", "Share of rows used to train the detector"),
    key(
        "ridges",
        "0.001,0.01,0.1",
        "Covariance ridges tried by cross-validation",
    ),
    optional("layers", "Hidden layers to score; empty means the penultimate one"),
];

pub const DETECT_SPEC: CommandSpec = CommandSpec {
    name: "detect",
    about: "Fit and evaluate the Mahalanobis detector on one attack run; writes detect.json",
    keys: DETECT_KEYS,
    parallel: false,
    run: run_detect,
};

fn run_detect(cfg: &RunConfig, opts: &Options) -> Result<()> {
    let clf = load_classifier(&cfg.required_path("classifier")?)?;
    let fit = load_dataset(
        &cfg.required_path("fit_data")?,
        &cfg.required_path("fit_labels")?,
        clf.num_classes(),
    )?;
    let data = load_tensor(&cfg.required_path("data")?)?;
    let run = AttackRun::load(&cfg.required_path("attack")?)?;
    let positions = run.successes(None);
    if positions.is_empty() {
        return Err(Error::Contract(format!(
            "{} has no successful attacks; the detector needs both clean and adversarial inputs",
            run.dir.display()
        )));
    }
    let (clean, adv) = run.pairs(&data, &positions)?;
    let dc = DetectConfig {
        layers: cfg.usize_list("layers")?,
        noise_std: cfg.f64("noise_std")?,
        train_frac: cfg.f64("train_frac")?,
        ridges: cfg.f64_list("ridges")?,
        seed: cfg.u64("seed")?,
    };
    let report = run_detection(
        &clf,
        &fit.x,
        &fit.y,
        &clean,
        &adv,
        run.variant.name(),
        Bounds::UNIT,
        &dc,
    )?;
    write_json(&opts.out.join("detect.json"), &report)
}

const EVALUATE_KEYS: &[Key] = &[
    key("attacks", "", "Attack run directories, run on the same inputs"),
    optional(
        "data",
        "The attacked inputs; enables latent shift, covariance and transfer",
    ),
    optional("labels", "Labels of data; needed for transfer"),
    optional("flow", "Flow checkpoint for the latent-shift statistic"),
    optional("targets", "Classifier checkpoints to measure transfer against"),
];

pub const EVALUATE_SPEC: CommandSpec = CommandSpec {
    name: "evaluate",
    about: "Success rates, query statistics and optional latent shift, covariance and transfer; writes evaluation.json",
    keys: EVALUATE_KEYS,
    parallel: false,
    run: run_evaluate,
};

#[derive(Serialize)]
struct ShiftSummary {
    variant: String,
    median: f64,
    samples: usize,
}

#[derive(Serialize)]
struct Evaluation {
    summary: ExperimentReport,
    latent_shift: Vec<ShiftSummary>,
    covariance: Option<CovarianceSummary>,
    transfer: Option<TransferMatrix>,
    /// Analyses that were skipped and why.
    notes: Vec<String>,
}

fn run_evaluate(cfg: &RunConfig, opts: &Options) -> Result<()> {
    let runs = cfg
        .path_list("attacks")
        .iter()
        .map(|d| AttackRun::load(d))
        .collect::<Result<Vec<_>>>()?;
    for (i, a) in runs.iter().enumerate() {
        if runs[..i].iter().any(|b| b.variant == a.variant) {
            return Err(Error::Contract(format!(
                "variant {} appears in more than one run",
                a.variant
            )));
        }
    }
    let named: Vec<(String, Vec<AttackRecord>)> = runs
        .iter()
        .map(|r| (r.variant.name().to_string(), r.records.clone()))
        .collect();
    let summary = query_stats(&named)?;
    let mut notes = Vec::new();
    let mut latent = Vec::new();
    let mut covariance = None;
    let mut transfer = None;
    let data = cfg.path("data").map(|p| load_tensor(&p)).transpose()?;
    match (&data, cfg.path("flow")) {
        (Some(data), Some(fp)) => {
            let flow = load_flow(&fp)?;
            for r in &runs {
                let pos = r.successes(None);
                if pos.is_empty() || flow.dim() != data.len() / data.rows().max(1) {
                    notes.push(format!("latent shift skipped for {}", r.variant));
                    continue;
                }
                let (clean, adv) = r.pairs(data, &pos)?;
                let s = latent_shift(&flow, &clean, &adv)?;
                latent.push(ShiftSummary {
                    variant: r.variant.name().into(),
                    median: s.median,
                    samples: pos.len(),
                });
            }
        }
        _ => notes.push("latent shift needs data and flow".into()),
    }
    if let Some(data) = &data {
        let find = |v: Variant| runs.iter().find(|r| r.variant == v);
        match (find(Variant::AdvFlow), find(Variant::NAttack)) {
            (Some(a), Some(n)) if summary.intersection.len() >= MIN_SAMPLES => {
                let delta = |r: &AttackRun| -> Result<Tensor> {
                    let (clean, adv) = r.pairs(data, &r.successes(Some(&summary.intersection)))?;
                    adv.flatten_rows().zip_with(&clean.flatten_rows(), |p, q| p - q)
                };
                covariance = Some(perturbation_covariance(&delta(a)?, &delta(n)?)?);
            }
            (Some(_), Some(_)) => notes.push(format!(
                "covariance needs {MIN_SAMPLES} mutually successful inputs, found {}",
                summary.intersection.len()
            )),
            _ => notes.push("covariance needs advflow and nattack runs".into()),
        }
    }
    let targets = cfg.path_list("targets");
    if !targets.is_empty() {
        let (Some(dp), Some(lp)) = (cfg.path("data"), cfg.path("labels")) else {
            return Err(Error::Config("transfer needs data and labels".into()));
        };
        let models = targets
            .iter()
            .map(|p| load_classifier(p))
            .collect::<Result<Vec<ToyClassifier>>>()?;
        let ds = load_dataset(&dp, &lp, models[0].num_classes())?;
        let picked: Vec<(Tensor, Vec<usize>)> = runs
            .iter()
            .map(|r| {
                let pos = r.successes(None);
                let (_, adv) = r.pairs(&ds.x, &pos)?;
                Ok((adv, pos.iter().map(|&k| ds.y[r.records[k].index]).collect()))
            })
            .collect::<Result<_>>()?;
        let sources: Vec<TransferSource<'_>> = runs
            .iter()
            .zip(&picked)
            .map(|(r, (adv, labels))| TransferSource {
                name: r.variant.name().into(),
                adversaries: adv,
                labels,
                attempted: r.records.len(),
            })
            .collect();
        let named_targets: Vec<(String, &dyn ProbabilityModel)> = targets
            .iter()
            .zip(&models)
            .map(|(p, m)| (p.display().to_string(), m as &dyn ProbabilityModel))
            .collect();
        transfer = Some(transferability(&sources, &named_targets)?);
    }
    let mut text = summary.table();
    for s in &latent {
        text.push_str(&format!(
            "latent shift {}: median {:.4} over {}\n",
            s.variant, s.median, s.samples
        ));
    }
    if let Some(c) = &covariance {
        text.push_str(&format!(
            "off-diagonal correlation: advflow {:.4}, nattack {:.4}, ratio {:.3} over {} inputs\n",
            c.advflow, c.nattack, c.ratio, c.samples
        ));
    }
    if let Some(t) = &transfer {
        text.push_str(&t.table());
    }
    std::fs::write(opts.out.join("evaluation.txt"), text)?;
    write_json(
        &opts.out.join("evaluation.json"),
        &Evaluation {
            summary,
            latent_shift: latent,
            covariance,
            transfer,
            notes,
        },
    )
}
