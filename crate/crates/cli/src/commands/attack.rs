//! `attack`: one black-box attack per input, optionally on a worker pool.

use flowattack::attack::{input_seed, run_attack, write_records, AttackConfig, AttackRecord, Variant};
use flowattack::blackbox::{argmax_rows, Oracle, ProbabilityModel};
use flowattack::diffcore::Tensor;
use flowattack::domain::Bounds;
use flowattack::eval::query_stats;
use flowattack::{Error, Result};
use rayon::prelude::*;

use super::{load_classifier, load_dataset, load_flow, save_tensor, write_json};
use crate::config::{key, optional, Key, RunConfig};
use crate::{CommandSpec, Options};

const KEYS: &[Key] = &[
    key("data", "", "Inputs to attack (tensor file)"),
    key("labels", "", "True labels of the inputs (tensor file)"),
    key("classifier", "", "Target classifier checkpoint"),
    optional("flow", "Flow checkpoint; needed by advflow, greedy and highres"),
    key("variant", "advflow", "Attack: advflow, greedy, highres or nattack"),
    key("seed", "0", "Global seed; each input derives its own stream from it"),
    key("sigma", "0.1", "Std of the search distribution"),
    key("lr", "0.02", "Learning rate of the mean update"),
    key("population", "20", "Candidates per iteration"),
    key("max_queries", "10000", "Candidate query budget per input"),
    key("epsilon", "8/255", "L-infinity radius"),
    key("check_interval", "200", "Candidate queries between success checks"),
    key("top_k", "4", "Candidates averaged per greedy update"),
    key("mu_init_std", "0.001", "Std of the random initial mean"),
    key("start", "0", "First input row to attack"),
    key("count", "0", "Number of inputs to attack; 0 attacks all from start"),
];

pub const SPEC: CommandSpec = CommandSpec {
    name: "attack",
    about: "Attack every selected input; writes records.jsonl, adversarial.nftd and report.json",
    keys: KEYS,
    parallel: true,
    run,
};

fn attack_config(cfg: &RunConfig, variant: Variant) -> Result<AttackConfig> {
    let c = AttackConfig {
        variant,
        sigma: cfg.f64("sigma")?,
        lr: cfg.f64("lr")?,
        population: cfg.usize("population")?,
        max_queries: cfg.u64("max_queries")?,
        epsilon: cfg.f64("epsilon")?,
        check_interval: cfg.u64("check_interval")?,
        top_k: cfg.usize("top_k")?,
        seed: cfg.u64("seed")?,
        mu_init_std: cfg.f64("mu_init_std")?,
        bounds: Bounds::UNIT,
    };
    c.validate()?;
    Ok(c)
}

fn run(cfg: &RunConfig, opts: &Options) -> Result<()> {
    let variant: Variant = cfg.choice("variant")?;
    let base = attack_config(cfg, variant)?;
    let clf = load_classifier(&cfg.required_path("classifier")?)?;
    let ds = load_dataset(
        &cfg.required_path("data")?,
        &cfg.required_path("labels")?,
        clf.num_classes(),
    )?;
    let flow = match cfg.path("flow") {
        Some(p) => Some(load_flow(&p)?),
        None if variant.needs_flow() => {
            return Err(Error::Config(format!("variant {variant} needs --flow")));
        }
        None => None,
    };
    let dim = ds.x.len() / ds.len().max(1);
    if clf.input_dim() != dim {
        return Err(Error::Contract(format!(
            "classifier expects {} features but inputs have {dim}",
            clf.input_dim()
        )));
    }
    if let (Some(f), false) = (&flow, variant == Variant::HighRes) {
        if f.dim() != dim {
            return Err(Error::Contract(format!(
                "flow has dimension {} but inputs have {dim}",
                f.dim()
            )));
        }
    }
    let start = cfg.usize("start")?;
    let count = match cfg.usize("count")? {
        0 => ds.len().saturating_sub(start),
        c => c,
    };
    if start + count > ds.len() || count == 0 {
        return Err(Error::Contract(format!(
            "rows {start}..{} are not within the {} available inputs",
            start + count,
            ds.len()
        )));
    }
    let clean_pred = argmax_rows(&clf.probabilities(&ds.x.select_rows(&(start..start + count).collect::<Vec<_>>()))?);
    let attack_one = |i: usize| -> Result<(AttackRecord, Tensor)> {
        let x = ds.x.select_rows(&[i]);
        let c = AttackConfig {
            seed: input_seed(base.seed, i as u64),
            ..base.clone()
        };
        let oracle = Oracle::new(&clf, None);
        let r = run_attack(flow.as_ref(), &oracle, &x, ds.y[i], &c).map_err(|e| e.in_context(format!("input {i}")))?;
        let example = r.example.clone().unwrap_or(x);
        Ok((r.record(i, c.seed, clean_pred[i - start] == ds.y[i]), example))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", opts.jobs)))?;
    let results: Vec<(AttackRecord, Tensor)> = pool.install(|| {
        (start..start + count)
            .into_par_iter()
            .map(attack_one)
            .collect::<Result<_>>()
    })?;
    let (records, examples): (Vec<AttackRecord>, Vec<Tensor>) = results.into_iter().unzip();
    std::fs::write(opts.out.join("records.jsonl"), write_records(&records)?)?;
    save_tensor(&opts.out.join("adversarial.nftd"), &Tensor::concat_rows(&examples)?)?;
    let report = query_stats(&[(variant.name().to_string(), records)])?;
    std::fs::write(opts.out.join("report.txt"), report.table())?;
    write_json(&opts.out.join("report.json"), &report)
}
