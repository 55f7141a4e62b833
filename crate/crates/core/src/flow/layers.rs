//! Invertible layers.
//!
//! Every layer implements both directions on a [`Tape`]: `normalize`
//! maps data towards the latent space and `generate` maps back. Both
//! return the per-sample log-determinant of their own Jacobian, or `None`
//! when it is identically zero.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffcore::{scatter_cols, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) type Step<'t> = (Var<'t>, Option<Var<'t>>);

/// `(2 alpha / pi) * atan(s / alpha)`: a smooth map onto `(-alpha, alpha)`.
pub fn soft_clamp(s: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("soft clamp needs alpha > 0, got {alpha}")));
    }
    Ok(2.0 * alpha / PI * (s / alpha).atan())
}

fn soft_clamp_var<'t>(s: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    s.scale(1.0 / alpha)?.atan()?.scale(2.0 * alpha / PI)
}

/// Fully connected subnetwork with two hidden leaky-relu layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnet {
    pub prefix: String,
    pub dims: [usize; 4],
}

pub const SUBNET_SLOPE: f64 = 0.1;

impl Subnet {
    fn param_names(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in 0..3 {
            out.push((format!("{}.w{l}", self.prefix), vec![self.dims[l], self.dims[l + 1]]));
            out.push((format!("{}.b{l}", self.prefix), vec![self.dims[l + 1]]));
        }
        out
    }

    fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, final_std: f64, rng: &mut R) -> Result<()> {
        for l in 0..3 {
            let shape = [self.dims[l], self.dims[l + 1]];
            let w = if l < 2 {
                Tensor::randn(&shape, (1.0 / self.dims[l] as f64).sqrt(), rng)
            } else if final_std > 0.0 {
                Tensor::randn(&shape, final_std, rng)
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(format!("{}.w{l}", self.prefix), w, true)?;
            let b = if l == 2 && final_std > 0.0 {
                Tensor::randn(&[self.dims[l + 1]], final_std, rng)
            } else {
                Tensor::zeros(&[self.dims[l + 1]])
            };
            params.insert(format!("{}.b{l}", self.prefix), b, true)?;
        }
        Ok(())
    }

    fn apply<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for l in 0..3 {
            let w = params.var(tape, &format!("{}.w{l}", self.prefix))?;
            let b = params.var(tape, &format!("{}.b{l}", self.prefix))?;
            h = h.matmul(&w)?.add(&b)?;
            if l < 2 {
                h = h.leaky_relu(SUBNET_SLOPE)?;
            }
        }
        Ok(h)
    }
}

/// Affine coupling with two half-updates.
///
/// Generative direction, with `c(.)` the soft clamp:
/// `x1 = z1 * exp(c(s1(z2))) + t1(z2)`, then
/// `x2 = z2 * exp(c(s2(x1))) + t2(x1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub width: usize,
    pub part1: Vec<usize>,
    pub part2: Vec<usize>,
    pub hidden: usize,
    pub alpha: f64,
    pub(crate) s1: Subnet,
    pub(crate) t1: Subnet,
    pub(crate) s2: Subnet,
    pub(crate) t2: Subnet,
}

impl Coupling {
    pub fn new(
        prefix: &str,
        width: usize,
        part1: Vec<usize>,
        part2: Vec<usize>,
        hidden: usize,
        alpha: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::domain(format!("clamp alpha must be positive, got {alpha}")));
        }
        if part1.is_empty() || part2.is_empty() || hidden == 0 {
            return Err(Error::contract("coupling halves and hidden width must be non-empty"));
        }
        let mut seen = vec![false; width];
        for &i in part1.iter().chain(&part2) {
            if i >= width || seen[i] {
                return Err(Error::contract(format!(
                    "coupling partition is not a partition of 0..{width} (index {i})"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::contract("coupling partition does not cover every feature"));
        }
        let (d1, d2) = (part1.len(), part2.len());
        let net = |tag: &str, i: usize, o: usize| Subnet {
            prefix: format!("{prefix}.{tag}"),
            dims: [i, hidden, hidden, o],
        };
        Ok(Self {
            width,
            s1: net("s1", d2, d1),
            t1: net("t1", d2, d1),
            s2: net("s2", d1, d2),
            t2: net("t2", d1, d2),
            part1,
            part2,
            hidden,
            alpha,
        })
    }

    fn nets(&self) -> [&Subnet; 4] {
        [&self.s1, &self.t1, &self.s2, &self.t2]
    }

    pub(crate) fn param_names(&self) -> Vec<(String, Vec<usize>)> {
        self.nets().iter().flat_map(|n| n.param_names()).collect()
    }

    pub(crate) fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, final_std: f64, rng: &mut R) -> Result<()> {
        for n in self.nets() {
            n.init(params, final_std, rng)?;
        }
        Ok(())
    }

    pub(crate) fn normalize<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Step<'t>> {
        let x1 = x.select_cols(&self.part1)?;
        let x2 = x.select_cols(&self.part2)?;
        let s2 = soft_clamp_var(self.s2.apply(tape, params, x1)?, self.alpha)?;
        let t2 = self.t2.apply(tape, params, x1)?;
        let z2 = x2.sub(&t2)?.mul(&s2.neg()?.exp()?)?;
        let s1 = soft_clamp_var(self.s1.apply(tape, params, z2)?, self.alpha)?;
        let t1 = self.t1.apply(tape, params, z2)?;
        let z1 = x1.sub(&t1)?.mul(&s1.neg()?.exp()?)?;
        let out = scatter_cols(&[(z1, &self.part1), (z2, &self.part2)], self.width)?;
        let logdet = s1.row_sum()?.add(&s2.row_sum()?)?.neg()?;
        Ok((out, Some(logdet)))
    }

    pub(crate) fn generate<'t>(&self, tape: &'t Tape, params: &ParamSet, z: Var<'t>) -> Result<Step<'t>> {
        let z1 = z.select_cols(&self.part1)?;
        let z2 = z.select_cols(&self.part2)?;
        let s1 = soft_clamp_var(self.s1.apply(tape, params, z2)?, self.alpha)?;
        let t1 = self.t1.apply(tape, params, z2)?;
        let x1 = z1.mul(&s1.exp()?)?.add(&t1)?;
        let s2 = soft_clamp_var(self.s2.apply(tape, params, x1)?, self.alpha)?;
        let t2 = self.t2.apply(tape, params, x1)?;
        let x2 = z2.mul(&s2.exp()?)?.add(&t2)?;
        let out = scatter_cols(&[(x1, &self.part1), (x2, &self.part2)], self.width)?;
        let logdet = s1.row_sum()?.add(&s2.row_sum()?)?;
        Ok((out, Some(logdet)))
    }
}

/// Fixed reordering `out[i] = in[perm[i]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Permutation {
    pub perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            if p >= perm.len() || inverse[p] != usize::MAX {
                return Err(Error::contract(format!("{perm:?} is not a permutation")));
            }
            inverse[p] = i;
        }
        Ok(Self { perm, inverse })
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        Self::new(perm).expect("shuffle yields a permutation")
    }

    /// Permutes whole channels of a `(c, s)` feature layout.
    pub fn channels<R: Rng + ?Sized>(c: usize, s: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(rng);
        let perm = order.iter().flat_map(|&ch| (0..s).map(move |p| ch * s + p)).collect();
        Self::new(perm).expect("channel shuffle yields a permutation")
    }

    /// Space-to-depth reshuffle `(c, h, w) -> (4c, h/2, w/2)`.
    ///
    /// Output channel `(dy * 2 + dx) * c + ch` holds input pixels
    /// `(ch, 2i + dy, 2j + dx)`.
    pub fn squeeze(c: usize, h: usize, w: usize) -> Result<Self> {
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(Error::contract(format!("squeeze needs even extents, got {h}x{w}")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let mut perm = vec![0; c * h * w];
        for dy in 0..2 {
            for dx in 0..2 {
                for ch in 0..c {
                    let nc = (dy * 2 + dx) * c + ch;
                    for i in 0..h2 {
                        for j in 0..w2 {
                            perm[(nc * h2 + i) * w2 + j] = (ch * h + 2 * i + dy) * w + 2 * j + dx;
                        }
                    }
                }
            }
        }
        Self::new(perm)
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub(crate) fn normalize<'t>(&self, x: Var<'t>) -> Result<Step<'t>> {
        Ok((x.select_cols(&self.perm)?, None))
    }

    pub(crate) fn generate<'t>(&self, z: Var<'t>) -> Result<Step<'t>> {
        Ok((z.select_cols(&self.inverse)?, None))
    }
}

/// Frozen channel mixing `Q (x) I_s` for a `(c, s)` feature layout.
#[derive(Clone, Debug)]
pub struct Mixing {
    pub channels: usize,
    pub spatial: usize,
    pub(crate) q_name: String,
    forward_t: Arc<Tensor>,
    inverse_t: Arc<Tensor>,
    logdet: f64,
}

impl PartialEq for Mixing {
    fn eq(&self, other: &Self) -> bool {
        self.channels == other.channels && self.spatial == other.spatial && self.q_name == other.q_name
    }
}

/// Random orthogonal matrix from the QR decomposition of a Gaussian matrix,
/// with column signs fixed so the law is Haar.
pub fn random_orthogonal<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Tensor {
    let g = Tensor::randn(&[c, c], 1.0, rng);
    let m = DMatrix::from_row_slice(c, c, g.data());
    let qr = m.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..c {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut data = Vec::with_capacity(c * c);
    for i in 0..c {
        for j in 0..c {
            data.push(q[(i, j)]);
        }
    }
    Tensor::new(vec![c, c], data).expect("orthogonal factor is finite")
}

impl Mixing {
    /// Builds the layer from a `(c, c)` matrix `q`.
    pub fn new(q_name: String, q: &Tensor, spatial: usize) -> Result<Self> {
        let c = q.rows();
        if q.shape() != [c, c] || spatial == 0 {
            return Err(Error::contract(format!(
                "mixing needs a square matrix, got {:?}",
                q.shape()
            )));
        }
        let qm = DMatrix::from_row_slice(c, c, q.data());
        let lu = qm.clone().lu();
        let det = lu.determinant();
        let qinv = lu.try_inverse().ok_or(Error::Singular {
            ridge: 0.0,
            condition: f64::INFINITY,
        })?;
        let d = c * spatial;
        // Row-vector convention: out = in * M^T with M = Q (x) I_s.
        let kron_t = |m: &DMatrix<f64>| {
            let mut data = vec![0.0; d * d];
            for a in 0..c {
                for b in 0..c {
                    let v = m[(a, b)];
                    for p in 0..spatial {
                        data[(b * spatial + p) * d + a * spatial + p] = v;
                    }
                }
            }
            Arc::new(Tensor::new(vec![d, d], data).expect("finite"))
        };
        Ok(Self {
            channels: c,
            spatial,
            q_name,
            forward_t: kron_t(&qm),
            inverse_t: kron_t(&qinv),
            logdet: spatial as f64 * det.abs().ln(),
        })
    }

    pub fn width(&self) -> usize {
        self.channels * self.spatial
    }

    /// `ln|det|` of the normalizing direction.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    fn const_logdet<'t>(&self, tape: &'t Tape, n: usize, sign: f64) -> Result<Option<Var<'t>>> {
        if self.logdet == 0.0 {
            return Ok(None);
        }
        Ok(Some(tape.constant(Tensor::full(&[n], sign * self.logdet))?))
    }

    pub(crate) fn normalize<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Step<'t>> {
        let m = tape.param(&format!("{}#fwd", self.q_name), &self.forward_t, false)?;
        let n = x.value().rows();
        Ok((x.matmul(&m)?, self.const_logdet(tape, n, 1.0)?))
    }

    pub(crate) fn generate<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Step<'t>> {
        let m = tape.param(&format!("{}#inv", self.q_name), &self.inverse_t, false)?;
        let n = z.value().rows();
        Ok((z.matmul(&m)?, self.const_logdet(tape, n, -1.0)?))
    }
}

/// Maps `[0, 1]` data to logits of `lambda + (1 - 2 lambda) x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logit {
    pub width: usize,
    pub shrink: f64,
}

impl Logit {
    pub fn new(width: usize, shrink: f64) -> Result<Self> {
        if !(shrink > 0.0 && shrink < 0.5) {
            return Err(Error::contract(format!(
                "logit shrink must lie in (0, 0.5), got {shrink}"
            )));
        }
        Ok(Self { width, shrink })
    }

    pub(crate) fn normalize<'t>(&self, x: Var<'t>) -> Result<Step<'t>> {
        let scale = 1.0 - 2.0 * self.shrink;
        let p = x.scale(scale)?.add_scalar(self.shrink)?;
        let log_p = p.log()?;
        let log_q = p.neg()?.add_scalar(1.0)?.log()?;
        let y = log_p.sub(&log_q)?;
        let ld = log_p
            .add(&log_q)?
            .row_sum()?
            .neg()?
            .add_scalar(self.width as f64 * scale.ln())?;
        Ok((y, Some(ld)))
    }

    pub(crate) fn generate<'t>(&self, z: Var<'t>) -> Result<Step<'t>> {
        let scale = 1.0 - 2.0 * self.shrink;
        let x = z.sigmoid()?.add_scalar(-self.shrink)?.scale(1.0 / scale)?;
        // ln s(y) + ln(1 - s(y)) = -|y| - 2 ln(1 + e^-|y|), stable for large |y|.
        // The generative direction is never differentiated, so this is a constant.
        let zv = z.value();
        let ld: Vec<f64> = (0..zv.rows())
            .map(|r| {
                zv.row(r)
                    .iter()
                    .map(|&y| -y.abs() - 2.0 * (-y.abs()).exp().ln_1p() - scale.ln())
                    .sum()
            })
            .collect();
        let ld = z.tape().constant(Tensor::new(vec![zv.rows()], ld)?)?;
        Ok((x, Some(ld)))
    }
}
