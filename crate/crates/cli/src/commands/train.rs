//! `train-flow` and `train-classifier`.

use flowattack::blackbox::{adversarial_train, AdvTrainConfig, ClassifierConfig};
use flowattack::domain::Bounds;
use flowattack::flow::{train_mle, FlowConfig, TrainConfig};
use flowattack::rng::stream;
use flowattack::{Error, Result};
use rand::seq::SliceRandom;
use serde::Serialize;

use super::{check_unit_box, load_dataset, load_tensor, with_path, write_json};
use crate::config::{key, Key, RunConfig};
use crate::{CommandSpec, Options};

const FLOW_KEYS: &[Key] = &[
    key("data", "", "Training inputs (tensor file, (n, d) or (n, c, h, w))"),
    key("seed", "0", "Global seed"),
    key("epochs", "50", "Training epochs"),
    key("batch_size", "64", "Minibatch size"),
    key("lr_start", "1e-4", "Initial Adam learning rate"),
    key("lr_end", "1e-6", "Final learning rate of the exponential schedule"),
    key("weight_decay", "1e-5", "Decoupled weight decay"),
    key("dequant_std", "0.02", "Std of dequantization noise added to each batch"),
    key("hidden", "128", "Hidden width of coupling subnetworks"),
    key("blocks", "4", "Coupling blocks for flat (n, d) data"),
    key("alpha", "1.5", "Soft-clamp bound on coupling log-scales"),
    key("holdout_frac", "0.1", "Share of rows held out to report NLL"),
];

pub const FLOW_SPEC: CommandSpec = CommandSpec {
    name: "train-flow",
    about: "Train a Real NVP flow by maximum likelihood; writes flow.ckpt and report.json",
    keys: FLOW_KEYS,
    parallel: false,
    run: run_flow,
};

#[derive(Serialize)]
struct FlowReport {
    dim: usize,
    image_shape: Option<[usize; 3]>,
    train_rows: usize,
    holdout_rows: usize,
    final_train_nll: Option<f64>,
    final_holdout_nll: Option<f64>,
    train_nll: Vec<f64>,
    holdout_nll: Vec<f64>,
    steps: usize,
}

/// Shuffled `(train, holdout)` row indices with `round(frac * n)` held out.
fn holdout_split(n: usize, frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::Config(format!("holdout fraction {frac} must lie in [0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, "holdout"));
    let k = ((n as f64) * frac).round() as usize;
    let (hold, train) = idx.split_at(k.min(n.saturating_sub(1)));
    let (mut train, mut hold) = (train.to_vec(), hold.to_vec());
    train.sort_unstable();
    hold.sort_unstable();
    Ok((train, hold))
}

fn run_flow(cfg: &RunConfig, opts: &Options) -> Result<()> {
    let path = cfg.required_path("data")?;
    let x = load_tensor(&path)?;
    check_unit_box(&x, &path)?;
    let seed = cfg.u64("seed")?;
    let hidden = cfg.usize("hidden")?;
    let mut fc = match *x.shape() {
        [_, d] => FlowConfig::flat(d, cfg.usize("blocks")?, hidden),
        [_, c, h, w] => FlowConfig::image(c, h, w, hidden),
        ref s => {
            return Err(with_path(
                &path,
                Err(Error::Contract(format!(
                    "flow data must be (n, d) or (n, c, h, w), got {s:?}"
                ))),
            )?)
        }
    };
    fc.alpha = cfg.f64("alpha")?;
    let image = x.shape().len() == 4;
    let mut flow = fc.build(&mut stream(seed, "flow-init"))?;
    let (train_idx, hold_idx) = holdout_split(x.rows(), cfg.f64("holdout_frac")?, seed)?;
    let train = x.select_rows(&train_idx);
    let hold = (!hold_idx.is_empty()).then(|| x.select_rows(&hold_idx));
    let tc = TrainConfig {
        epochs: cfg.usize("epochs")?,
        batch_size: cfg.usize("batch_size")?,
        lr_start: cfg.f64("lr_start")?,
        lr_end: cfg.f64("lr_end")?,
        weight_decay: cfg.f64("weight_decay")?,
        dequant_std: cfg.f64("dequant_std")?,
        // Logit-input image flows need dequantized batches kept in range.
        clip: image.then_some(Bounds::UNIT),
    };
    let report = train_mle(&mut flow, &train, hold.as_ref(), &tc, &mut stream(seed, "flow-train"))?;
    flow.save(opts.out.join("flow.ckpt"))?;
    write_json(
        &opts.out.join("report.json"),
        &FlowReport {
            dim: flow.dim(),
            image_shape: flow.image_shape(),
            train_rows: train_idx.len(),
            holdout_rows: hold_idx.len(),
            final_train_nll: report.train_nll.last().copied(),
            final_holdout_nll: hold.as_ref().and(report.final_holdout()),
            train_nll: report.train_nll,
            holdout_nll: report.holdout_nll,
            steps: report.steps,
        },
    )
}

const CLASSIFIER_KEYS: &[Key] = &[
    key("data", "", "Training inputs (tensor file)"),
    key("labels", "", "Integer labels (tensor file, shape (n,))"),
    key("seed", "0", "Global seed"),
    key("classes", "0", "Number of classes; 0 infers it from the labels"),
    key("hidden", "32,32", "Hidden layer widths"),
    key("epochs", "60", "Training epochs"),
    key("batch_size", "64", "Minibatch size"),
    key("lr", "1e-2", "Adam learning rate"),
    key("weight_decay", "0", "Decoupled weight decay"),
    key(
        "adv_epsilon",
        "0",
        "PGD radius for adversarial training; 0 trains normally",
    ),
    key("adv_step", "0", "PGD step size; 0 means adv_epsilon / 4"),
    key("adv_steps", "7", "PGD steps per batch"),
    key("test_frac", "0.2", "Share of rows held out to report accuracy"),
];

pub const CLASSIFIER_SPEC: CommandSpec = CommandSpec {
    name: "train-classifier",
    about: "Train the black-box target classifier; writes classifier.ckpt and report.json",
    keys: CLASSIFIER_KEYS,
    parallel: false,
    run: run_classifier,
};

#[derive(Serialize)]
struct ClassifierSummary {
    classes: usize,
    train_rows: usize,
    test_rows: usize,
    adversarial_epsilon: f64,
    train_accuracy: f64,
    test_accuracy: Option<f64>,
    epoch_loss: Vec<f64>,
}

fn run_classifier(cfg: &RunConfig, opts: &Options) -> Result<()> {
    let ds = load_dataset(
        &cfg.required_path("data")?,
        &cfg.required_path("labels")?,
        cfg.usize("classes")?,
    )?;
    let seed = cfg.u64("seed")?;
    let (train_idx, test_idx) = holdout_split(ds.len(), cfg.f64("test_frac")?, seed)?;
    let train = ds.subset(&train_idx);
    let epsilon = cfg.f64("adv_epsilon")?;
    let step = match cfg.f64("adv_step")? {
        0.0 => epsilon / 4.0,
        s => s,
    };
    let ac = AdvTrainConfig {
        epsilon,
        step,
        steps: cfg.usize("adv_steps")?,
        base: ClassifierConfig {
            hidden: cfg.usize_list("hidden")?,
            epochs: cfg.usize("epochs")?,
            batch_size: cfg.usize("batch_size")?,
            lr: cfg.f64("lr")?,
            weight_decay: cfg.f64("weight_decay")?,
        },
    };
    let (clf, report) = adversarial_train(&train, &ac, &mut stream(seed, "classifier"))?;
    clf.save(opts.out.join("classifier.ckpt"))?;
    let test_accuracy = if test_idx.is_empty() {
        None
    } else {
        Some(clf.accuracy(&ds.subset(&test_idx))?)
    };
    write_json(
        &opts.out.join("report.json"),
        &ClassifierSummary {
            classes: ds.num_classes,
            train_rows: train_idx.len(),
            test_rows: test_idx.len(),
            adversarial_epsilon: epsilon,
            train_accuracy: report.train_accuracy,
            test_accuracy,
            epoch_loss: report.epoch_loss,
        },
    )
}
