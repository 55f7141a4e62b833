//! Real NVP normalizing flow.
//!
//! A [`FlowModel`] is an ordered list of stages stored in the normalizing
//! direction (data to latent). Every stage acts on the leading `width`
//! features of the current state; a [`Stage::Split`] stops processing the
//! trailing features, which pass straight through to the latent vector.
//! The latent vector is laid out as the final active features followed by
//! the exited blocks, latest exit first.
//!
//! `forward` is the generative map `f: z -> x` and `inverse` is `f^-1`.

mod checkpoint;
mod layers;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::FLOW_MAGIC;
pub use layers::{random_orthogonal, soft_clamp, Coupling, Logit, Mixing, Permutation, Subnet, SUBNET_SLOPE};
pub use train::{train_mle, TrainConfig, TrainReport};

use crate::diffcore::{concat_cols, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use layers::Step;

/// Rows evaluated per tape when mapping large batches.
const CHUNK: usize = 2048;

/// One step of the normalizing pass.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Stage {
    Coupling(Coupling),
    Permutation(Permutation),
    /// Space-to-depth reshuffle of a `(c, h, w)` layout.
    Squeeze {
        c: usize,
        h: usize,
        w: usize,
        perm: Permutation,
    },
    Mixing(Mixing),
    Logit(Logit),
    /// Keep only the first `keep` features active.
    Split {
        keep: usize,
    },
}

impl Stage {
    pub fn kind(&self) -> &'static str {
        match self {
            Stage::Coupling(_) => "coupling",
            Stage::Permutation(_) => "permutation",
            Stage::Squeeze { .. } => "squeeze",
            Stage::Mixing(_) => "mixing",
            Stage::Logit(_) => "logit",
            Stage::Split { .. } => "split",
        }
    }

    /// True for stages whose map is affine with a constant Jacobian.
    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            Stage::Permutation(_) | Stage::Squeeze { .. } | Stage::Mixing(_) | Stage::Split { .. }
        )
    }
}

/// An invertible map with tractable log-determinant and a standard-normal base.
#[derive(Clone, Debug)]
pub struct FlowModel {
    dim: usize,
    image: Option<[usize; 3]>,
    stages: Vec<Stage>,
    widths: Vec<usize>,
    params: ParamSet,
}

/// Incremental construction of a [`FlowModel`].
pub struct FlowBuilder<'r, R: Rng + ?Sized> {
    dim: usize,
    image: Option<[usize; 3]>,
    active: usize,
    stages: Vec<Stage>,
    widths: Vec<usize>,
    params: ParamSet,
    hidden: usize,
    alpha: f64,
    final_init_std: f64,
    rng: &'r mut R,
}

impl<'r, R: Rng + ?Sized> FlowBuilder<'r, R> {
    pub fn new(dim: usize, rng: &'r mut R) -> Self {
        Self {
            dim,
            image: None,
            active: dim,
            stages: Vec::new(),
            widths: Vec::new(),
            params: ParamSet::new(),
            hidden: 64,
            alpha: 1.5,
            final_init_std: 0.0,
            rng,
        }
    }

    /// Marks the data as `(c, h, w)` images; samples are reshaped accordingly.
    pub fn image(mut self, c: usize, h: usize, w: usize) -> Result<Self> {
        if c * h * w != self.dim {
            return Err(Error::contract(format!(
                "image {c}x{h}x{w} does not match dim {}",
                self.dim
            )));
        }
        self.image = Some([c, h, w]);
        Ok(self)
    }

    pub fn hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Std of the final subnetwork layers; 0 makes every coupling start as the identity.
    pub fn final_init_std(mut self, std: f64) -> Self {
        self.final_init_std = std;
        self
    }

    pub fn active_width(&self) -> usize {
        self.active
    }

    fn prefix(&self) -> String {
        format!("L{}", self.stages.len())
    }

    fn push(&mut self, stage: Stage) {
        self.widths.push(self.active);
        self.stages.push(stage);
    }

    pub fn coupling(mut self, part1: Vec<usize>, part2: Vec<usize>) -> Result<Self> {
        let c = Coupling::new(&self.prefix(), self.active, part1, part2, self.hidden, self.alpha)?;
        c.init(&mut self.params, self.final_init_std, self.rng)?;
        self.push(Stage::Coupling(c));
        Ok(self)
    }

    /// Coupling over the first and second half of the active features.
    pub fn coupling_halves(self) -> Result<Self> {
        let h = self.active / 2;
        let w = self.active;
        self.coupling((0..h).collect(), (h..w).collect())
    }

    pub fn permutation(mut self, perm: Vec<usize>) -> Result<Self> {
        if perm.len() != self.active {
            return Err(Error::contract(format!(
                "permutation of {} features at active width {}",
                perm.len(),
                self.active
            )));
        }
        self.push(Stage::Permutation(Permutation::new(perm)?));
        Ok(self)
    }

    pub fn random_permutation(self) -> Result<Self> {
        let p = Permutation::random(self.active, self.rng);
        self.permutation(p.perm)
    }

    pub fn mixing(mut self, channels: usize, spatial: usize) -> Result<Self> {
        if channels * spatial != self.active {
            return Err(Error::contract(format!(
                "mixing {channels}x{spatial} at active width {}",
                self.active
            )));
        }
        let q = random_orthogonal(channels, self.rng);
        let name = format!("{}.q", self.prefix());
        let m = Mixing::new(name.clone(), &q, spatial)?;
        self.params.insert(name, q, false)?;
        self.push(Stage::Mixing(m));
        Ok(self)
    }

    pub fn squeeze(mut self, c: usize, h: usize, w: usize) -> Result<Self> {
        if c * h * w != self.active {
            return Err(Error::contract(format!(
                "squeeze {c}x{h}x{w} at active width {}",
                self.active
            )));
        }
        let perm = Permutation::squeeze(c, h, w)?;
        self.push(Stage::Squeeze { c, h, w, perm });
        Ok(self)
    }

    pub fn logit(mut self, shrink: f64) -> Result<Self> {
        let l = Logit::new(self.active, shrink)?;
        self.push(Stage::Logit(l));
        Ok(self)
    }

    pub fn split(mut self, keep: usize) -> Result<Self> {
        if keep == 0 || keep >= self.active {
            return Err(Error::contract(format!(
                "split keep {keep} at active width {}",
                self.active
            )));
        }
        self.push(Stage::Split { keep });
        self.active = keep;
        Ok(self)
    }

    pub fn build(self) -> FlowModel {
        FlowModel {
            dim: self.dim,
            image: self.image,
            stages: self.stages,
            widths: self.widths,
            params: self.params,
        }
    }
}

/// Architecture presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FlowArch {
    /// Blocks of mixing, coupling over halves, random permutation.
    Flat { dim: usize, blocks: usize },
    /// Logit, checkerboard couplings, squeeze, channel blocks, a split
    /// keeping a quarter of the features, then fully connected blocks.
    Image {
        c: usize,
        h: usize,
        w: usize,
        high_blocks: usize,
        low_blocks: usize,
        fc_blocks: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub arch: FlowArch,
    pub hidden: usize,
    pub alpha: f64,
    pub logit_shrink: f64,
    pub final_init_std: f64,
}

impl FlowConfig {
    pub fn flat(dim: usize, blocks: usize, hidden: usize) -> Self {
        Self {
            arch: FlowArch::Flat { dim, blocks },
            hidden,
            alpha: 1.5,
            logit_shrink: 0.05,
            final_init_std: 0.0,
        }
    }

    pub fn image(c: usize, h: usize, w: usize, hidden: usize) -> Self {
        Self {
            arch: FlowArch::Image {
                c,
                h,
                w,
                high_blocks: 2,
                low_blocks: 2,
                fc_blocks: 2,
            },
            hidden,
            alpha: 1.5,
            logit_shrink: 0.05,
            final_init_std: 0.0,
        }
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<FlowModel> {
        match self.arch {
            FlowArch::Flat { dim, blocks } => {
                if dim < 2 {
                    return Err(Error::contract("flat flows need at least 2 features"));
                }
                let mut b = FlowBuilder::new(dim, rng)
                    .hidden(self.hidden)
                    .alpha(self.alpha)
                    .final_init_std(self.final_init_std);
                for _ in 0..blocks {
                    b = b.mixing(dim, 1)?.coupling_halves()?.random_permutation()?;
                }
                Ok(b.build())
            }
            FlowArch::Image {
                c,
                h,
                w,
                high_blocks,
                low_blocks,
                fc_blocks,
            } => {
                let dim = c * h * w;
                let mut b = FlowBuilder::new(dim, rng)
                    .image(c, h, w)?
                    .hidden(self.hidden)
                    .alpha(self.alpha)
                    .final_init_std(self.final_init_std)
                    .logit(self.logit_shrink)?;
                for k in 0..high_blocks {
                    let (even, odd) = checkerboard(c, h, w);
                    b = if k % 2 == 0 {
                        b.coupling(even, odd)?
                    } else {
                        b.coupling(odd, even)?
                    };
                    if c > 1 {
                        b = b.mixing(c, h * w)?;
                    }
                }
                b = b.squeeze(c, h, w)?;
                let (c2, s2) = (4 * c, (h / 2) * (w / 2));
                for _ in 0..low_blocks {
                    let half = (c2 / 2) * s2;
                    b = b.mixing(c2, s2)?.coupling((0..half).collect(), (half..dim).collect())?;
                    let p = Permutation::channels(c2, s2, b.rng);
                    b = b.permutation(p.perm)?;
                }
                if fc_blocks > 0 {
                    let keep = dim / 4;
                    b = b.split(keep)?;
                    for _ in 0..fc_blocks {
                        b = b.mixing(keep, 1)?.coupling_halves()?.random_permutation()?;
                    }
                }
                Ok(b.build())
            }
        }
    }
}

/// Checkerboard partition of a `(c, h, w)` layout by pixel parity.
fn checkerboard(c: usize, h: usize, w: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut even, mut odd) = (Vec::new(), Vec::new());
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let idx = (ch * h + i) * w + j;
                if (i + j) % 2 == 0 {
                    even.push(idx);
                } else {
                    odd.push(idx);
                }
            }
        }
    }
    (even, odd)
}

fn add_logdet<'t>(acc: Option<Var<'t>>, ld: Option<Var<'t>>) -> Result<Option<Var<'t>>> {
    Ok(match (acc, ld) {
        (Some(a), Some(b)) => Some(a.add(&b)?),
        (a, b) => a.or(b),
    })
}

impl FlowModel {
    /// The identity flow on `dim` features.
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            image: None,
            stages: Vec::new(),
            widths: Vec::new(),
            params: ParamSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.image
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// True when every stage is affine (permutations, mixing, squeeze, splits).
    pub fn is_linear(&self) -> bool {
        self.stages.iter().all(Stage::is_linear)
    }

    fn final_width(&self) -> usize {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Split { keep } => Some(*keep),
                _ => None,
            })
            .next_back()
            .unwrap_or(self.dim)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.dim || x.shape().is_empty() {
            return Err(Error::contract(format!(
                "flow of dimension {} given input of shape {:?}",
                self.dim,
                x.shape()
            )));
        }
        Ok(())
    }

    fn stage_normalize<'t>(&self, stage: &Stage, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Step<'t>> {
        match stage {
            Stage::Coupling(c) => c.normalize(tape, params, x),
            Stage::Permutation(p) => p.normalize(x),
            Stage::Squeeze { perm, .. } => perm.normalize(x),
            Stage::Mixing(m) => m.normalize(tape, x),
            Stage::Logit(l) => l.normalize(x),
            Stage::Split { .. } => unreachable!("splits are handled by the caller"),
        }
    }

    fn stage_generate<'t>(&self, stage: &Stage, tape: &'t Tape, params: &ParamSet, z: Var<'t>) -> Result<Step<'t>> {
        match stage {
            Stage::Coupling(c) => c.generate(tape, params, z),
            Stage::Permutation(p) => p.generate(z),
            Stage::Squeeze { perm, .. } => perm.generate(z),
            Stage::Mixing(m) => m.generate(tape, z),
            Stage::Logit(l) => l.generate(z),
            Stage::Split { .. } => unreachable!("splits are handled by the caller"),
        }
    }

    /// `f^-1` on the tape: returns the latent batch and `ln|det d f^-1 / dx|` per row.
    pub fn inverse_var<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let n = x.value().rows();
        let mut active = x;
        let mut exits = Vec::new();
        let mut logdet = None;
        for (i, stage) in self.stages.iter().enumerate() {
            if let Stage::Split { keep } = stage {
                exits.push(active.slice_cols(*keep, self.widths[i])?);
                active = active.slice_cols(0, *keep)?;
                continue;
            }
            let (out, ld) = self
                .stage_normalize(stage, tape, params, active)
                .map_err(|e| e.in_context(format!("flow layer {i} ({})", stage.kind())))?;
            active = out;
            logdet = add_logdet(logdet, ld)?;
        }
        let z = if exits.is_empty() {
            active
        } else {
            let mut parts = vec![active];
            parts.extend(exits.into_iter().rev());
            concat_cols(&parts)?
        };
        let logdet = match logdet {
            Some(l) => l,
            None => tape.constant(Tensor::zeros(&[n]))?,
        };
        Ok((z, logdet))
    }

    /// `f` on the tape: returns the data batch and `ln|det df/dz|` per row.
    pub fn forward_var<'t>(&self, tape: &'t Tape, params: &ParamSet, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let n = z.value().rows();
        let fw = self.final_width();
        let mut active = z.slice_cols(0, fw)?;
        let mut offset = fw;
        let mut logdet = None;
        for (i, stage) in self.stages.iter().enumerate().rev() {
            if let Stage::Split { keep } = stage {
                let exit_w = self.widths[i] - keep;
                let exit = z.slice_cols(offset, offset + exit_w)?;
                offset += exit_w;
                active = concat_cols(&[active, exit])?;
                continue;
            }
            let (out, ld) = self
                .stage_generate(stage, tape, params, active)
                .map_err(|e| e.in_context(format!("flow layer {i} ({})", stage.kind())))?;
            active = out;
            logdet = add_logdet(logdet, ld)?;
        }
        let logdet = match logdet {
            Some(l) => l,
            None => tape.constant(Tensor::zeros(&[n]))?,
        };
        Ok((active, logdet))
    }

    /// Leaky-relu branch pattern taken while decoding `z`; equal
    /// signatures mean both inputs lie in the same smooth piece of `f`.
    pub fn kink_signature(&self, z: &Tensor) -> Result<u64> {
        let tape = Tape::new();
        let zv = tape.constant(z.clone().flatten_rows())?;
        self.forward_var(&tape, &self.params, zv)?;
        Ok(tape.kink_signature())
    }

    /// Per-row `log p(x) = log N(f^-1(x)) + ln|det d f^-1 / dx|`.
    pub fn log_prob_var<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>> {
        let (z, logdet) = self.inverse_var(tape, params, x)?;
        z.gaussian_log_density(0.0, 1.0)?.row_sum()?.add(&logdet)
    }

    /// Mean negative log-likelihood in nats per sample.
    pub fn nll_var<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>> {
        self.log_prob_var(tape, params, x)?.mean()?.neg()
    }

    fn map_chunks(
        &self,
        x: &Tensor,
        f: impl for<'t> Fn(&'t Tape, Var<'t>) -> Result<(Var<'t>, Var<'t>)>,
    ) -> Result<(Tensor, Vec<f64>)> {
        self.check_input(x)?;
        let flat = x.clone().flatten_rows();
        let n = flat.rows();
        let mut outs = Vec::new();
        let mut lds = Vec::with_capacity(n);
        for start in (0..n.max(1)).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let tape = Tape::new();
            let v = tape.constant(flat.select_rows(&idx))?;
            let (out, ld) = f(&tape, v)?;
            outs.push(out.value().as_ref().clone());
            lds.extend_from_slice(ld.value().data());
        }
        Ok((Tensor::concat_rows(&outs)?, lds))
    }

    /// `z = f^-1(x)` with per-row log-determinants. Output is `(n, dim)`.
    pub fn inverse(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.map_chunks(x, |t, v| self.inverse_var(t, &self.params, v))
    }

    /// `x = f(z)` with per-row log-determinants, shaped like the training data.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let (x, ld) = self.map_chunks(z, |t, v| self.forward_var(t, &self.params, v))?;
        Ok((self.to_data_shape(x)?, ld))
    }

    /// `f(z)` without log-determinants.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.forward(z)?.0)
    }

    /// `f^-1(x)` as a `(n, dim)` batch.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inverse(x)?.0)
    }

    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (z, ld) = self.inverse(x)?;
        let c = -0.5 * (2.0 * std::f64::consts::PI).ln() * self.dim as f64;
        Ok((0..z.rows())
            .map(|r| c - 0.5 * z.row(r).iter().map(|v| v * v).sum::<f64>() + ld[r])
            .collect())
    }

    /// Reshapes a flat `(n, dim)` batch to `(n, c, h, w)` for image flows.
    pub fn to_data_shape(&self, x: Tensor) -> Result<Tensor> {
        match self.image {
            Some([c, h, w]) => {
                let n = x.rows();
                x.reshape(vec![n, c, h, w])
            }
            None => Ok(x),
        }
    }

    /// `n` samples `f(z)` with `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::contract("sample count must be at least 1"));
        }
        let z = Tensor::randn(&[n, self.dim], 1.0, rng);
        self.decode(&z)
    }
}
