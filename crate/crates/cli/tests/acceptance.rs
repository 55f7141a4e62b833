//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Trend criteria are measured on desk-scale targets and may fail honestly.
//! The run exits 0 regardless unless `ACCEPTANCE_STRICT` is set, in which
//! case any FAIL makes it exit 1.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use flowattack::attack::{input_seed, nes_gradient, nes_raw_estimate, run_attack, AttackConfig, AttackRecord, Variant};
use flowattack::blackbox::{
    adversarial_train, train_classifier, AdvTrainConfig, ClassifierConfig, Oracle, ProbabilityModel, ToyClassifier,
};
use flowattack::data::{digits, two_moons, Dataset};
use flowattack::detect::{latent_shift, run_detection, DetectConfig};
use flowattack::diffcore::{grad_check, Tensor};
use flowattack::domain::Bounds;
use flowattack::eval::{lemma1_check, numeric_jacobian, perturbation_covariance, query_stats, ExperimentReport};
use flowattack::flow::{train_mle, FlowBuilder, FlowConfig, FlowModel, TrainConfig};
use flowattack::rng::stream;
use flowattack::{Error, Result};
use rayon::prelude::*;

struct Verdict {
    pass: bool,
    detail: String,
}

/// Measures one criterion.
type Check = fn() -> Result<Verdict>;

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

/// A trained flow and classifier with a held-out set to attack.
struct Target {
    name: &'static str,
    flow: FlowModel,
    clf: ToyClassifier,
    train: Dataset,
    test: Dataset,
    /// Test rows the classifier gets right, in order.
    correct: Vec<usize>,
    epsilon: f64,
}

impl Target {
    fn new(
        name: &'static str,
        flow: FlowModel,
        clf: ToyClassifier,
        train: Dataset,
        test: Dataset,
        epsilon: f64,
    ) -> Self {
        let pred = clf.predict(&test.x).expect("classifier accepts its test set");
        let correct = (0..test.len()).filter(|&i| pred[i] == test.y[i]).collect();
        Self {
            name,
            flow,
            clf,
            train,
            test,
            correct,
            epsilon,
        }
    }
}

fn moons() -> &'static Target {
    static CELL: OnceLock<Target> = OnceLock::new();
    CELL.get_or_init(|| {
        let train = two_moons(1000, 0.1, &mut stream(0, "data"));
        let test = two_moons(400, 0.1, &mut stream(1, "data"));
        let mut flow = FlowConfig::flat(2, 4, 64).build(&mut stream(0, "flow")).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            lr_start: 1e-3,
            lr_end: 1e-5,
            ..TrainConfig::default()
        };
        train_mle(&mut flow, &train.x, None, &cfg, &mut stream(0, "train")).unwrap();
        let (clf, _) = train_classifier(&train, &ClassifierConfig::default(), &mut stream(0, "clf")).unwrap();
        Target::new("two-moons", flow, clf, train, test, 0.3)
    })
}

fn defended_moons() -> &'static Target {
    static CELL: OnceLock<Target> = OnceLock::new();
    CELL.get_or_init(|| {
        let m = moons();
        let cfg = AdvTrainConfig {
            epsilon: 0.1,
            step: 0.025,
            steps: 7,
            base: ClassifierConfig::default(),
        };
        let (clf, _) = adversarial_train(&m.train, &cfg, &mut stream(0, "clf")).unwrap();
        Target::new(
            "defended two-moons",
            m.flow.clone(),
            clf,
            m.train.clone(),
            m.test.clone(),
            0.3,
        )
    })
}

fn digits8() -> &'static Target {
    static CELL: OnceLock<Target> = OnceLock::new();
    CELL.get_or_init(|| {
        let train = digits(4000, 8, &mut stream(0, "data"));
        let test = digits(2000, 8, &mut stream(1, "data"));
        let mut flow = FlowConfig::image(1, 8, 8, 64).build(&mut stream(0, "flow")).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            lr_start: 1e-3,
            lr_end: 1e-5,
            clip: Some(Bounds::UNIT),
            ..TrainConfig::default()
        };
        train_mle(&mut flow, &train.x, None, &cfg, &mut stream(0, "train")).unwrap();
        let (clf, _) = train_classifier(&train, &ClassifierConfig::default(), &mut stream(0, "clf")).unwrap();
        Target::new("digits8", flow, clf, train, test, 8.0 / 255.0)
    })
}

/// Candidate rows checked against the feasible set, and rows outside it.
static CHECKED: AtomicU64 = AtomicU64::new(0);
static VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Oracle that counts every queried row leaving the feasible set around `x`.
fn guarded<'m>(model: &'m dyn ProbabilityModel, x: &Tensor, eps: f64) -> Oracle<'m> {
    let x = x.clone().flatten_rows();
    Oracle::new(model, None).with_validator(move |batch: &Tensor| -> Result<()> {
        for r in 0..batch.rows() {
            let bad = batch
                .row(r)
                .iter()
                .zip(x.row(0))
                .any(|(c, a)| (c - a).abs() > eps + 1e-12 || !Bounds::UNIT.contains(*c));
            CHECKED.fetch_add(1, Ordering::Relaxed);
            if bad {
                VIOLATIONS.fetch_add(1, Ordering::Relaxed);
            }
        }
        Ok(())
    })
}

#[derive(Clone)]
struct Outcome {
    record: AttackRecord,
    example: Option<Tensor>,
}

type CacheKey = (&'static str, Variant, u64, usize);

fn cache() -> &'static Mutex<HashMap<CacheKey, Outcome>> {
    static CELL: OnceLock<Mutex<HashMap<CacheKey, Outcome>>> = OnceLock::new();
    CELL.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Attacks test rows `idx` of `t`, reusing earlier results for the same
/// target, variant, seed and row.
fn attack(t: &Target, variant: Variant, seed: u64, idx: &[usize]) -> Result<Vec<Outcome>> {
    let missing: Vec<usize> = {
        let c = cache().lock().unwrap();
        idx.iter()
            .copied()
            .filter(|&i| !c.contains_key(&(t.name, variant, seed, i)))
            .collect()
    };
    let fresh = missing
        .par_iter()
        .map(|&i| {
            let x = t.test.x.select_rows(&[i]);
            let cfg = AttackConfig {
                variant,
                epsilon: t.epsilon,
                seed: input_seed(seed, i as u64),
                ..AttackConfig::default()
            };
            let oracle = guarded(&t.clf, &x, t.epsilon);
            let r = run_attack(Some(&t.flow), &oracle, &x, t.test.y[i], &cfg)?;
            Ok((
                i,
                Outcome {
                    record: r.record(i, cfg.seed, true),
                    example: r.example,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut c = cache().lock().unwrap();
    for (i, o) in fresh {
        c.insert((t.name, variant, seed, i), o);
    }
    Ok(idx.iter().map(|&i| c[&(t.name, variant, seed, i)].clone()).collect())
}

fn success_rate(runs: &[Outcome]) -> f64 {
    runs.iter().filter(|o| o.record.success).count() as f64 / runs.len() as f64
}

fn compare(t: &Target, seed: u64, idx: &[usize]) -> Result<(ExperimentReport, Vec<Outcome>, Vec<Outcome>)> {
    let a = attack(t, Variant::AdvFlow, seed, idx)?;
    let n = attack(t, Variant::NAttack, seed, idx)?;
    let records = |v: &[Outcome]| v.iter().map(|o| o.record.clone()).collect::<Vec<_>>();
    let report = query_stats(&[("advflow".into(), records(&a)), ("nattack".into(), records(&n))])?;
    Ok((report, a, n))
}

/// Clean inputs and adversarial examples of the successful attacks among `runs`,
/// optionally restricted to `keep`.
fn pairs(t: &Target, runs: &[Outcome], keep: Option<&[usize]>) -> Result<(Tensor, Tensor)> {
    let chosen: Vec<&Outcome> = runs
        .iter()
        .filter(|o| o.record.success && keep.is_none_or(|k| k.contains(&o.record.index)))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Contract("no successful attacks".into()));
    }
    let clean: Vec<usize> = chosen.iter().map(|o| o.record.index).collect();
    let adv: Vec<Tensor> = chosen
        .iter()
        .map(|o| o.example.clone().expect("success has an example"))
        .collect();
    Ok((t.test.x.select_rows(&clean), Tensor::concat_rows(&adv)?))
}

fn first_correct(t: &Target, n: usize) -> Vec<usize> {
    t.correct.iter().copied().take(n).collect()
}

fn random_flat_flow(dim: usize, seed: u64) -> Result<FlowModel> {
    let mut cfg = FlowConfig::flat(dim, 2, 16);
    cfg.final_init_std = 0.3;
    cfg.build(&mut stream(seed, "flow"))
}

fn criterion_1() -> Result<Verdict> {
    let mut logdet_err = 0.0f64;
    for dim in [2, 4, 8] {
        for seed in 0..5 {
            let flow = random_flat_flow(dim, seed)?;
            let z = Tensor::randn(&[1, dim], 1.0, &mut stream(seed, "z"));
            let (x, ld) = flow.forward(&z)?;
            // f^-1 has the reciprocal Jacobian determinant.
            let jac = numeric_jacobian(&flow, &x, 1e-5)?;
            logdet_err = logdet_err.max((ld[0] + jac.determinant().abs().ln()).abs());
        }
    }
    let mut trip_err = 0.0f64;
    for dim in [2, 4, 8, 16, 64] {
        let flow = random_flat_flow(dim, dim as u64)?;
        let z = Tensor::randn(&[8, dim], 1.0, &mut stream(dim as u64, "z"));
        let (x, _) = flow.forward(&z)?;
        trip_err = trip_err.max(flow.inverse(&x)?.0.max_abs_diff(&z));
    }
    // Riemann sum of the trained density over a box holding the data.
    let m = moons();
    let (lo, hi, cells) = (-1.0, 2.0, 400usize);
    let w = (hi - lo) / cells as f64;
    let mut mass = 0.0;
    for i in 0..cells {
        let row: Vec<f64> = (0..cells)
            .flat_map(|j| [lo + (i as f64 + 0.5) * w, lo + (j as f64 + 0.5) * w])
            .collect();
        let lp = m.flow.log_prob(&Tensor::new(vec![cells, 2], row)?)?;
        mass += lp.iter().map(|l| l.exp()).sum::<f64>() * w * w;
    }
    verdict(
        logdet_err < 1e-3 && trip_err <= 1e-4 && (mass - 1.0).abs() <= 0.02,
        format!(
            "max log-det error {logdet_err:.2e}, max round-trip error {trip_err:.2e}, density mass on [{lo}, {hi}]^2 {mass:.4}"
        ),
    )
}

fn criterion_2() -> Result<Verdict> {
    let mut rng = stream(1, "flow");
    let flow = FlowBuilder::new(2, &mut rng)
        .hidden(6)
        .final_init_std(0.3)
        .coupling_halves()?
        .random_permutation()?
        .coupling_halves()?
        .build();
    let x = Tensor::randn(&[8, 2], 1.0, &mut stream(1, "x"));
    let mle = grad_check(
        |t, p| {
            let v = t.constant(x.clone())?;
            flow.nll_var(t, p, v)
        },
        flow.params(),
        1e-3,
        1e-3,
    )?;
    let d = two_moons(16, 0.1, &mut stream(3, "data"));
    let clf = ToyClassifier::new(2, &[8, 8], 2, &mut stream(3, "clf"))?;
    let cls = grad_check(
        |t, p| {
            let v = t.constant(d.x.clone())?;
            clf.loss_var(t, p, v, &d.y)
        },
        clf.params(),
        1e-3,
        1e-3,
    )?;
    verdict(
        mle.passed && cls.passed,
        format!(
            "flow MLE max deviation {:.2e} ({} kink-skipped), classifier loss {:.2e} ({} kink-skipped)",
            mle.max_deviation(),
            mle.skipped,
            cls.max_deviation(),
            cls.skipped
        ),
    )
}

fn criterion_3() -> Result<Verdict> {
    let mu = [1.0, -2.0, 0.5];
    let sigma = 0.5;
    let n = 100_000;
    let norm = mu.iter().map(|m| 4.0 * m * m).sum::<f64>().sqrt();
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let eps = Tensor::randn(&[n, 3], 1.0, &mut stream(seed, "nes"));
        let losses: Vec<f64> = (0..n)
            .map(|k| eps.row(k).iter().zip(&mu).map(|(e, m)| (m + sigma * e).powi(2)).sum())
            .collect();
        let g = nes_raw_estimate(&losses, &eps, sigma)?;
        let err = g
            .iter()
            .zip(&mu)
            .map(|(gi, m)| (gi - 2.0 * m).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(err / norm);
    }
    let eps = Tensor::randn(&[20, 5], 1.0, &mut stream(0, "flat"));
    let step = nes_gradient(&[0.7; 20], &eps)?;
    let zero = step.flat && step.gradient.iter().all(|&g| g == 0.0);
    verdict(
        worst < 0.05 && zero,
        format!(
            "worst relative error {:.2}% over 3 seeds, equal-loss step exactly zero: {zero}",
            100.0 * worst
        ),
    )
}

fn criterion_4() -> Result<Verdict> {
    let before = VIOLATIONS.load(Ordering::Relaxed);
    let m = moons();
    let mr = success_rate(&attack(m, Variant::AdvFlow, 0, &first_correct(m, 200))?);
    let d = digits8();
    let dr = success_rate(&attack(d, Variant::AdvFlow, 0, &first_correct(d, 200))?);
    let bad = VIOLATIONS.load(Ordering::Relaxed) - before;
    verdict(
        mr >= 0.9 && dr >= 0.7 && bad == 0,
        format!(
            "two-moons {:.1}% (eps 0.3), digits8 {:.1}% (eps 8/255), infeasible queries {bad} of {} checked",
            100.0 * mr,
            100.0 * dr,
            CHECKED.load(Ordering::Relaxed)
        ),
    )
}

/// Digits rows attacked for the correlation, detection and latent-shift criteria.
static DIGITS_ROWS: OnceLock<Vec<usize>> = OnceLock::new();

fn criterion_6() -> Result<Verdict> {
    const NEEDED: usize = 500;
    let d = digits8();
    let cap = d.correct.len().min(1200);
    let mut n = 200;
    let (report, a, na) = loop {
        let run = compare(d, 0, &first_correct(d, n))?;
        if run.0.intersection.len() >= NEEDED || n >= cap {
            break run;
        }
        n = (n + 100).min(cap);
    };
    let _ = DIGITS_ROWS.set(first_correct(d, n));
    let both = &report.intersection;
    let (ca, aa) = pairs(d, &a, Some(both))?;
    let (cn, an) = pairs(d, &na, Some(both))?;
    let delta = |adv: &Tensor, clean: &Tensor| adv.zip_with(clean, |x, y| x - y).map(Tensor::flatten_rows);
    let cov = perturbation_covariance(&delta(&aa, &ca)?, &delta(&an, &cn)?)?;
    verdict(
        both.len() >= NEEDED && cov.ratio >= 3.0,
        format!(
            "{} mutually successful of {n} attacked; mean |corr| advflow {:.3}, nattack {:.3}, ratio {:.2} (need >= 3)",
            both.len(),
            cov.advflow,
            cov.nattack,
            cov.ratio
        ),
    )
}

fn criterion_7() -> Result<Verdict> {
    let d = digits8();
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let rows = match seed {
            0 => DIGITS_ROWS.get().cloned().unwrap_or_else(|| first_correct(d, 200)),
            _ => first_correct(d, 300),
        };
        let (_, a, n) = compare(d, seed, &rows)?;
        let auroc = |runs: &[Outcome], name: &str| -> Result<f64> {
            let (clean, adv) = pairs(d, runs, None)?;
            let cfg = DetectConfig {
                seed,
                ..DetectConfig::default()
            };
            Ok(run_detection(&d.clf, &d.train.x, &d.train.y, &clean, &adv, name, Bounds::UNIT, &cfg)?.auroc)
        };
        let (ra, rn) = (auroc(&a, "advflow")?, auroc(&n, "nattack")?);
        pass &= ra <= rn - 0.05;
        parts.push(format!("seed {seed}: advflow {ra:.3} vs nattack {rn:.3}"));
    }
    verdict(
        pass,
        format!("AUROC {} (need advflow <= nattack - 0.05)", parts.join("; ")),
    )
}

fn criterion_8() -> Result<Verdict> {
    let d = digits8();
    let rows = DIGITS_ROWS.get().cloned().unwrap_or_else(|| first_correct(d, 200));
    let (report, a, n) = compare(d, 0, &rows)?;
    let both = &report.intersection;
    let shift = |runs: &[Outcome]| -> Result<f64> {
        let (clean, adv) = pairs(d, runs, Some(both))?;
        Ok(latent_shift(&d.flow, &clean, &adv)?.median)
    };
    let (sa, sn) = (shift(&a)?, shift(&n)?);
    verdict(
        sa < sn,
        format!(
            "median relative latent shift advflow {sa:.4} vs nattack {sn:.4} over {} inputs",
            both.len()
        ),
    )
}

fn criterion_9() -> Result<Verdict> {
    let t = defended_moons();
    let (report, _, _) = compare(t, 0, &first_correct(t, 200))?;
    let (a, n) = (&report.variants[0], &report.variants[1]);
    let (ma, mn) = (a.median_queries, n.median_queries);
    let rates_ok = a.success_rate >= n.success_rate - 0.02;
    let median_ok = matches!((ma, mn), (Some(x), Some(y)) if x <= y);
    verdict(
        rates_ok && median_ok,
        format!(
            "success advflow {:.1}% vs nattack {:.1}% ({}), median queries {ma:?} vs {mn:?} over {} inputs ({})",
            100.0 * a.success_rate,
            100.0 * n.success_rate,
            if rates_ok { "ok" } else { "fails" },
            report.intersection.len(),
            if median_ok { "ok" } else { "fails" }
        ),
    )
}

fn rec(index: usize, variant: Variant, success: bool, queries: u64) -> AttackRecord {
    AttackRecord {
        index,
        variant,
        success,
        queries,
        oracle_queries: queries + queries / 200 + 1,
        linf: success.then_some(0.01),
        seed: 0,
        clean_correct: true,
    }
}

fn criterion_10() -> Result<Verdict> {
    // Hand-computed fixture: both variants broke rows 0, 3, 4 and 6.
    // advflow there: 200, 600, 1000, 1400 -> mean 800, lower median 600.
    // nattack there: 400, 200, 600, 800 -> mean 500, lower median 400.
    let outcomes = [
        (true, 200, true, 400),
        (true, 400, false, 10000),
        (false, 10000, true, 800),
        (true, 600, true, 200),
        (true, 1000, true, 600),
        (true, 200, false, 10000),
        (true, 1400, true, 800),
    ];
    let a: Vec<AttackRecord> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| rec(i, Variant::AdvFlow, o.0, o.1))
        .collect();
    let n: Vec<AttackRecord> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| rec(i, Variant::NAttack, o.2, o.3))
        .collect();
    let r = query_stats(&[("advflow".into(), a.clone()), ("nattack".into(), n)])?;
    let (va, vn) = (&r.variants[0], &r.variants[1]);
    let fixture = r.intersection == [0, 3, 4, 6]
        && va.mean_queries == Some(800.0)
        && va.median_queries == Some(600)
        && vn.mean_queries == Some(500.0)
        && vn.median_queries == Some(400)
        && va.success_rate == 6.0 / 7.0
        && vn.success_rate == 5.0 / 7.0;
    let failures: Vec<AttackRecord> = a.iter().map(|r| rec(r.index, Variant::NAttack, false, 10000)).collect();
    let empty = query_stats(&[("advflow".into(), a), ("nattack".into(), failures)])?;
    let empty_ok = empty.intersection_empty && empty.variants.iter().all(|v| v.median_queries.is_none());
    // Medians of the real runs made so far.
    let mut medians = Vec::new();
    for t in [moons(), digits8(), defended_moons()] {
        let keys: Vec<(Variant, u64, usize)> = {
            let c = cache().lock().unwrap();
            c.keys().filter(|k| k.0 == t.name).map(|k| (k.1, k.2, k.3)).collect()
        };
        for seed in 0..3u64 {
            let rows = |v: Variant| {
                let mut r: Vec<usize> = keys.iter().filter(|k| k.0 == v && k.1 == seed).map(|k| k.2).collect();
                r.sort_unstable();
                r
            };
            let rows_a = rows(Variant::AdvFlow);
            if rows_a.is_empty() || rows_a != rows(Variant::NAttack) {
                continue;
            }
            let (report, _, _) = compare(t, seed, &rows_a)?;
            medians.extend(report.variants.iter().filter_map(|v| v.median_queries));
        }
    }
    let multiples = !medians.is_empty() && medians.iter().all(|m| m % 200 == 0);
    verdict(
        fixture && empty_ok && multiples,
        format!(
            "synthetic fixture {}, empty intersection {}, {} real medians all multiples of 200: {multiples}",
            if fixture { "matches" } else { "differs" },
            if empty_ok {
                "reports no medians"
            } else {
                "reports medians"
            },
            medians.len()
        ),
    )
}

fn criterion_5() -> Result<Verdict> {
    let m = moons();
    let scales = [1e-2, 1e-3, 1e-4];
    let (mut smooth, mut worst_spread) = (0, 1.0f64);
    for i in 0..100 {
        let rows = lemma1_check(&m.flow, &m.test.x.select_rows(&[i]), &[0.6, -0.8], &scales)?;
        if !rows.iter().all(|r| r.smooth) {
            continue;
        }
        smooth += 1;
        let (lo, hi) = rows
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(r.ratio), b.max(r.ratio)));
        worst_spread = worst_spread.max(hi / lo);
    }
    let mut rng = stream(0, "linear");
    let linear = [
        FlowModel::identity(3),
        FlowBuilder::new(3, &mut rng).permutation(vec![1, 2, 0])?.build(),
        FlowBuilder::new(4, &mut rng)
            .mixing(4, 1)?
            .random_permutation()?
            .build(),
    ];
    let mut linear_err = 0.0f64;
    for flow in &linear {
        assert!(flow.is_linear());
        let d = flow.dim();
        let x = Tensor::new(vec![1, d], (0..d).map(|k| 0.2 + 0.15 * k as f64).collect())?;
        let v: Vec<f64> = (0..d).map(|k| 1.0 - 0.5 * k as f64).collect();
        for r in lemma1_check(flow, &x, &v, &scales)? {
            linear_err = linear_err.max(r.error);
        }
    }
    verdict(
        smooth >= 50 && worst_spread < 10.0 && linear_err <= 1e-12,
        format!(
            "{smooth}/100 kink-free paths, worst error/t^2 spread {worst_spread:.2}x, max error on linear flows {linear_err:.1e}"
        ),
    )
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(dir: &Path, jobs: &str) -> Result<Duration> {
    let t0 = Instant::now();
    let steps: &[&[&str]] = &[
        &["gen-data", "--out", "train", "--n", "1000", "--seed", "0"],
        &["gen-data", "--out", "test", "--n", "200", "--seed", "1"],
        &[
            "train-flow",
            "--out",
            "flow",
            "--data",
            "train/data.nftd",
            "--epochs",
            "60",
            "--hidden",
            "64",
            "--lr-start",
            "1e-3",
            "--lr-end",
            "1e-5",
        ],
        &[
            "train-classifier",
            "--out",
            "clf",
            "--data",
            "train/data.nftd",
            "--labels",
            "train/labels.nftd",
        ],
        &[
            "attack",
            "--out",
            "advflow",
            "--variant",
            "advflow",
            "--data",
            "test/data.nftd",
            "--labels",
            "test/labels.nftd",
            "--classifier",
            "clf/classifier.ckpt",
            "--flow",
            "flow/flow.ckpt",
            "--epsilon",
            "0.3",
            "--jobs",
            jobs,
        ],
        &[
            "attack",
            "--out",
            "nattack",
            "--variant",
            "nattack",
            "--data",
            "test/data.nftd",
            "--labels",
            "test/labels.nftd",
            "--classifier",
            "clf/classifier.ckpt",
            "--epsilon",
            "0.3",
            "--jobs",
            jobs,
        ],
        &[
            "detect",
            "--out",
            "detect",
            "--classifier",
            "clf/classifier.ckpt",
            "--fit-data",
            "train/data.nftd",
            "--fit-labels",
            "train/labels.nftd",
            "--data",
            "test/data.nftd",
            "--attack",
            "advflow",
        ],
        &[
            "evaluate",
            "--out",
            "evaluate",
            "--attacks",
            "advflow,nattack",
            "--data",
            "test/data.nftd",
            "--labels",
            "test/labels.nftd",
            "--flow",
            "flow/flow.ckpt",
            "--targets",
            "clf/classifier.ckpt",
        ],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_flowattack"))
            .args(*args)
            .current_dir(dir)
            .output()?;
        if !out.status.success() {
            return Err(Error::Contract(format!(
                "`flowattack {}` failed: {}",
                args.join(" "),
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
    }
    Ok(t0.elapsed())
}

fn criterion_11() -> Result<Verdict> {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let ta = pipeline(a.path(), "1")?;
    let tb = pipeline(b.path(), "2")?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let limit = Duration::from_secs(600);
    verdict(
        differing.is_empty() && ta < limit && tb < limit,
        format!(
            "{} output files, differing: {differing:?}; runs took {:.1}s and {:.1}s (1 and 2 workers)",
            fa.len(),
            ta.as_secs_f64(),
            tb.as_secs_f64()
        ),
    )
}

fn main() {
    let criteria: [(u32, Check, Option<u64>); 11] = [
        (1, criterion_1, Some(120)),
        (2, criterion_2, Some(60)),
        (3, criterion_3, Some(60)),
        (4, criterion_4, Some(600)),
        (5, criterion_5, Some(60)),
        (6, criterion_6, Some(900)),
        (7, criterion_7, Some(1200)),
        (8, criterion_8, None),
        (9, criterion_9, Some(900)),
        (10, criterion_10, None),
        (11, criterion_11, None),
    ];
    let mut failed = 0;
    for (n, check, budget) in criteria {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(check);
        let secs = t0.elapsed().as_secs_f64();
        let (mut pass, mut detail) = match outcome {
            Ok(Ok(v)) => (v.pass, v.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        if let Some(limit) = budget.filter(|&l| secs > l as f64) {
            pass = false;
            detail.push_str(&format!("; over the {limit}s budget"));
        }
        failed += usize::from(!pass);
        println!(
            "criterion {n}: {} {detail} [{secs:.1}s]",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
