use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pgd::pgd_attack;
use super::{argmax_rows, ProbabilityModel};
use crate::data::Dataset;
use crate::diffcore::{Adam, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::{Container, TensorRecord};

pub const CLASSIFIER_MAGIC: [u8; 4] = *b"CLCK";

/// Fully connected softmax classifier with leaky-relu hidden layers.
#[derive(Clone, Debug)]
pub struct ToyClassifier {
    dims: Vec<usize>,
    slope: f64,
    params: ParamSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            epochs: 60,
            batch_size: 64,
            lr: 1e-2,
            weight_decay: 0.0,
        }
    }
}

/// Madry-style adversarial training: every batch is replaced by its PGD adversary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    pub epsilon: f64,
    pub step: f64,
    pub steps: usize,
    pub base: ClassifierConfig,
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || self.steps == 0 {
            return Err(Error::contract(
                "adversarial training needs epsilon >= 0 and steps >= 1",
            ));
        }
        if self.epsilon > 0.0 && !(self.step > 0.0 && self.step <= self.epsilon) {
            return Err(Error::contract(format!(
                "pgd step must lie in (0, epsilon], got {} with epsilon {}",
                self.step, self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    /// Mean training cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

impl ToyClassifier {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], classes: usize, rng: &mut R) -> Result<Self> {
        if input == 0 || classes < 2 {
            return Err(Error::contract("classifier needs inputs and at least two classes"));
        }
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let mut params = ParamSet::new();
        for l in 0..dims.len() - 1 {
            let std = (2.0 / dims[l] as f64).sqrt();
            params.insert(format!("w{l}"), Tensor::randn(&[dims[l], dims[l + 1]], std, rng), true)?;
            params.insert(format!("b{l}"), Tensor::zeros(&[dims[l + 1]]), true)?;
        }
        Ok(Self {
            dims,
            slope: 0.01,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn num_hidden(&self) -> usize {
        self.dims.len() - 2
    }

    /// Logits on the tape, optionally stopping after hidden layer `upto`.
    fn run<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>, upto: Option<usize>) -> Result<Var<'t>> {
        let layers = self.dims.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let w = params.var(tape, &format!("w{l}"))?;
            let b = params.var(tape, &format!("b{l}"))?;
            h = h.matmul(&w)?.add(&b)?;
            if l + 1 < layers {
                h = h.leaky_relu(self.slope)?;
                if upto == Some(l) {
                    return Ok(h);
                }
            }
        }
        Ok(h)
    }

    pub fn logits_var<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>> {
        self.run(tape, params, x, None)
    }

    /// Mean cross-entropy of a batch.
    pub fn loss_var<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>, y: &[usize]) -> Result<Var<'t>> {
        self.logits_var(tape, params, x)?.softmax_cross_entropy(y)
    }

    fn flat_input(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.dims[0] || x.shape().is_empty() {
            return Err(Error::contract(format!(
                "classifier expects {} features, got shape {:?}",
                self.dims[0],
                x.shape()
            )));
        }
        Ok(x.clone().flatten_rows())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let v = tape.constant(self.flat_input(x)?)?;
        Ok(self.logits_var(&tape, &self.params, v)?.value().as_ref().clone())
    }

    /// Activations after hidden layer `layer` (0-based).
    pub fn features(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        if layer >= self.num_hidden() {
            return Err(Error::contract(format!(
                "hidden layer {layer} requested from a classifier with {} hidden layers",
                self.num_hidden()
            )));
        }
        let tape = Tape::new();
        let v = tape.constant(self.flat_input(x)?)?;
        Ok(self.run(&tape, &self.params, v, Some(layer))?.value().as_ref().clone())
    }

    /// Index of the last hidden layer.
    pub fn penultimate(&self) -> usize {
        self.num_hidden().saturating_sub(1)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let pred = self.predict(&data.x)?;
        let hits = pred.iter().zip(&data.y).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / data.len().max(1) as f64)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CLASSIFIER_MAGIC);
        let dims = self.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        c.header.push(format!("classifier dims={dims} slope={}", self.slope));
        c.tensors = self
            .params
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                value: e.value.as_ref().clone(),
            })
            .collect();
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: &str| Error::format(0, format!("classifier manifest: {m}"));
        let line = c
            .header
            .first()
            .and_then(|l| l.strip_prefix("classifier "))
            .ok_or_else(|| bad("missing classifier line"))?;
        let mut dims = None;
        let mut slope = None;
        for kv in line.split(' ') {
            match kv.split_once('=') {
                Some(("dims", v)) => {
                    dims = Some(
                        v.split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| bad("unparsable dims"))?,
                    )
                }
                Some(("slope", v)) => slope = Some(v.parse::<f64>().map_err(|_| bad("unparsable slope"))?),
                _ => return Err(bad(&format!("unknown field {kv:?}"))),
            }
        }
        let dims: Vec<usize> = dims.ok_or_else(|| bad("missing dims"))?;
        if dims.len() < 2 || c.header.len() != 1 {
            return Err(bad("malformed header"));
        }
        let mut params = ParamSet::new();
        for l in 0..dims.len() - 1 {
            for (name, shape) in [
                (format!("w{l}"), vec![dims[l], dims[l + 1]]),
                (format!("b{l}"), vec![dims[l + 1]]),
            ] {
                let t = c.tensor(&name).ok_or_else(|| bad(&format!("missing tensor {name}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Shape {
                        op: "classifier checkpoint",
                        lhs: shape,
                        rhs: t.shape().to_vec(),
                    });
                }
                params.insert(name, t.clone(), true)?;
            }
        }
        if params.len() != c.tensors.len() {
            return Err(bad("payload has extra tensors"));
        }
        Ok(Self {
            dims,
            slope: slope.ok_or_else(|| bad("missing slope"))?,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path, CLASSIFIER_MAGIC)?)
    }
}

impl ProbabilityModel for ToyClassifier {
    fn input_dim(&self) -> usize {
        self.dims[0]
    }

    fn num_classes(&self) -> usize {
        *self.dims.last().expect("at least two layers")
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(x)?;
        let k = logits.cols();
        let mut out = Vec::with_capacity(logits.len());
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / s));
        }
        Tensor::new(vec![logits.rows(), k], out)
    }
}

fn fit<R: Rng + ?Sized>(
    data: &Dataset,
    cfg: &ClassifierConfig,
    adv: Option<(f64, f64, usize)>,
    rng: &mut R,
) -> Result<(ToyClassifier, ClassifierReport)> {
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::contract("batch size and learning rate must be positive"));
    }
    if let Some(&bad) = data.y.iter().find(|&&c| c >= data.num_classes) {
        return Err(Error::contract(format!("label {bad} out of range")));
    }
    let mut clf = ToyClassifier::new(data.dim(), &cfg.hidden, data.num_classes, rng)?;
    let x = data.x.clone().flatten_rows();
    let mut opt = Adam::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = ClassifierReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let y: Vec<usize> = idx.iter().map(|&i| data.y[i]).collect();
            let mut batch = x.select_rows(idx);
            if let Some((eps, step, steps)) = adv {
                batch = pgd_attack(&clf, &batch, &y, eps, step, steps, data.bounds)?;
            }
            let tape = Tape::new();
            let v = tape.constant(batch)?;
            let loss = clf
                .loss_var(&tape, &clf.params, v, &y)
                .map_err(|e| e.in_context(format!("epoch {epoch} batch {b}")))?;
            let value = loss.value().item()?;
            if !value.is_finite() {
                return Err(Error::numeric(format!("non-finite loss at epoch {epoch} batch {b}")));
            }
            let grads = tape.backward(loss)?.for_params(&clf.params);
            opt.step(&mut clf.params, &grads, cfg.lr)?;
            total += value * idx.len() as f64;
        }
        report.epoch_loss.push(total / data.len() as f64);
    }
    report.train_accuracy = clf.accuracy(data)?;
    Ok((clf, report))
}

/// Standard cross-entropy training with Adam.
pub fn train_classifier<R: Rng + ?Sized>(
    data: &Dataset,
    cfg: &ClassifierConfig,
    rng: &mut R,
) -> Result<(ToyClassifier, ClassifierReport)> {
    fit(data, cfg, None, rng)
}

/// Trains on PGD adversaries of every batch. With `epsilon = 0` this is
/// exactly [`train_classifier`].
pub fn adversarial_train<R: Rng + ?Sized>(
    data: &Dataset,
    cfg: &AdvTrainConfig,
    rng: &mut R,
) -> Result<(ToyClassifier, ClassifierReport)> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return fit(data, &cfg.base, None, rng);
    }
    fit(data, &cfg.base, Some((cfg.epsilon, cfg.step, cfg.steps)), rng)
}
