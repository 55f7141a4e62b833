//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`].
//! [`Tape::backward`] then walks the nodes in reverse order and
//! accumulates vector-Jacobian products. A tape serves one forward pass:
//! after `backward` it is consumed and must be [`Tape::reset`] before the
//! next pass.
//!
//! Binary elementwise primitives broadcast by suffix: an operand whose
//! shape is a trailing suffix of the other operand's shape (or a single
//! element) is repeated along the leading dimensions.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::hash::Hasher;
use std::sync::Arc;

use super::params::{GradMap, ParamSet};
use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Tanh,
    Atan,
    Exp,
    Log,
    Sigmoid,
    LeakyRelu(f64),
    Pow(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(BinKind, usize, usize),
    Unary(UnaryKind, usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    SelectCols(usize, Vec<usize>),
    ScatterCols(Vec<(usize, Vec<usize>)>),
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    GaussLogDensity {
        x: usize,
        mean: f64,
        std: f64,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
    consumed: bool,
    kinks: KinkHasher,
}

/// FNV-1a over the sign pattern of every leaky-relu input.
struct KinkHasher(u64);

impl Default for KinkHasher {
    fn default() -> Self {
        KinkHasher(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for KinkHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Recorded operation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Output shape of a suffix-broadcast binary op, or `None` if incompatible.
fn broadcast_shape(a: &Tensor, b: &Tensor) -> Option<Vec<usize>> {
    let suffix_of =
        |small: &[usize], big: &[usize]| small.len() <= big.len() && big[big.len() - small.len()..] == *small;
    if a.shape() == b.shape() {
        Some(a.shape().to_vec())
    } else if a.len() == 1 && b.len() == 1 {
        // Keep the higher rank so the result does not depend on operand order.
        Some(
            if a.shape().len() >= b.shape().len() {
                a.shape()
            } else {
                b.shape()
            }
            .to_vec(),
        )
    } else if b.len() == 1 || suffix_of(b.shape(), a.shape()) {
        Some(a.shape().to_vec())
    } else if a.len() == 1 || suffix_of(a.shape(), b.shape()) {
        Some(b.shape().to_vec())
    } else {
        None
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all nodes so the tape can record a fresh forward pass.
    pub fn reset(&self) {
        *self.inner.borrow_mut() = Inner::default();
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hash of the sign pattern of all leaky-relu inputs seen so far.
    ///
    /// Two forward passes with equal signatures took the same linear
    /// piece of every leaky-relu, which finite differencing relies on.
    pub fn kink_signature(&self) -> u64 {
        self.inner.borrow().kinks.finish()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::numeric(format!("{name} produced a non-finite value")));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::contract(
                "tape already consumed by backward; reset it before recording",
            ));
        }
        inner.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: inner.nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Binds a named parameter. Binding the same name twice returns the same node.
    pub fn param(&self, name: &str, value: &Arc<Tensor>, trainable: bool) -> Result<Var<'_>> {
        if let Some(&id) = self.inner.borrow().params.get(name) {
            return Ok(Var { tape: self, id });
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::contract("tape already consumed by backward"));
        }
        inner.nodes.push(Node {
            value: Arc::clone(value),
            op: Op::Leaf,
            requires_grad: trainable,
        });
        let id = inner.nodes.len() - 1;
        inner.params.insert(name.to_string(), id);
        Ok(Var { tape: self, id })
    }

    /// Reverse pass from a scalar `loss` recorded on this tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("loss was not recorded on this tape"));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::contract(
                "stale tape: backward already ran for this forward pass",
            ));
        }
        let loss_val = &inner.nodes[loss.id].value;
        if loss_val.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            backprop_node(nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let out = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients {
            grads: out,
            params: inner.params.clone(),
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    // ---- primitive constructors ---------------------------------------

    fn binary<'t>(&'t self, kind: BinKind, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value_of(a.id), self.value_of(b.id));
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let shape = broadcast_shape(&av, &bv).ok_or_else(|| shape_err(name, &av, &bv))?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let (la, lb) = (ad.len(), bd.len());
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let data: Vec<f64> = if la == n && lb == n {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(ad[i % la], bd[i % lb])).collect()
        };
        let rg = self.needs_grad(a.id) || self.needs_grad(b.id);
        self.push(Tensor::from_parts(shape, data), Op::Binary(kind, a.id, b.id), rg, name)
    }

    fn unary<'t>(&'t self, kind: UnaryKind, a: Var<'t>) -> Result<Var<'t>> {
        let av = self.value_of(a.id);
        let name = match kind {
            UnaryKind::Tanh => "tanh",
            UnaryKind::Atan => "atan",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::LeakyRelu(_) => "leaky_relu",
            UnaryKind::Pow(_) => "pow",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar(_) => "add_scalar",
        };
        match kind {
            UnaryKind::Log => {
                if let Some(v) = av.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::domain(format!("log of non-positive value {v}")));
                }
            }
            UnaryKind::Pow(p) => {
                if p.fract() != 0.0 {
                    if let Some(v) = av.data().iter().find(|&&v| v < 0.0) {
                        return Err(Error::domain(format!(
                            "pow({v}, {p}) with negative base and fractional exponent"
                        )));
                    }
                }
            }
            UnaryKind::LeakyRelu(_) => {
                let mut inner = self.inner.borrow_mut();
                for chunk in av.data().chunks(64) {
                    let bits = chunk
                        .iter()
                        .enumerate()
                        .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > 0.0) << i));
                    inner.kinks.write_u64(bits);
                }
            }
            _ => {}
        }
        let out = av.map(|x| match kind {
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Atan => x.atan(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            UnaryKind::Pow(p) => x.powf(p),
            UnaryKind::Scale(c) => c * x,
            UnaryKind::AddScalar(c) => x + c,
        });
        self.push(out, Op::Unary(kind, a.id), self.needs_grad(a.id), name)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[*a].requires_grad {
                // dA = G B^T
                accumulate(grads, *a, m * k, |ga| {
                    let bd = bv.data();
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let b_row = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
            }
            if nodes[*b].requires_grad {
                // dB = A^T G
                accumulate(grads, *b, k * n, |gb| {
                    let ad = av.data();
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a = ad[i * k + p];
                            if a == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                *o += a * gv;
                            }
                        }
                    }
                });
            }
        }
        Op::Binary(kind, a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (la, lb) = (av.len(), bv.len());
            if nodes[*a].requires_grad {
                accumulate(grads, *a, la, |ga| match kind {
                    BinKind::Add | BinKind::Sub => {
                        for (i, &gv) in g.iter().enumerate() {
                            ga[i % la] += gv;
                        }
                    }
                    BinKind::Mul => {
                        let bd = bv.data();
                        for (i, &gv) in g.iter().enumerate() {
                            ga[i % la] += gv * bd[i % lb];
                        }
                    }
                });
            }
            if nodes[*b].requires_grad {
                accumulate(grads, *b, lb, |gb| match kind {
                    BinKind::Add => {
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % lb] += gv;
                        }
                    }
                    BinKind::Sub => {
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % lb] -= gv;
                        }
                    }
                    BinKind::Mul => {
                        let ad = av.data();
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % lb] += gv * ad[i % la];
                        }
                    }
                });
            }
        }
        Op::Unary(kind, a) => {
            let x = nodes[*a].value.data();
            let y = out.data();
            accumulate(grads, *a, x.len(), |ga| {
                for i in 0..x.len() {
                    let d = match *kind {
                        UnaryKind::Tanh => 1.0 - y[i] * y[i],
                        UnaryKind::Atan => 1.0 / (1.0 + x[i] * x[i]),
                        UnaryKind::Exp => y[i],
                        UnaryKind::Log => 1.0 / x[i],
                        UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                        UnaryKind::LeakyRelu(s) => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                s
                            }
                        }
                        UnaryKind::Pow(p) => {
                            if p == 0.0 {
                                0.0
                            } else {
                                p * x[i].powf(p - 1.0)
                            }
                        }
                        UnaryKind::Scale(c) => c,
                        UnaryKind::AddScalar(_) => 1.0,
                    };
                    ga[i] += g[i] * d;
                }
            });
        }
        Op::Sum(a) => {
            let n = nodes[*a].value.len();
            accumulate(grads, *a, n, |ga| ga.iter_mut().for_each(|v| *v += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len();
            let s = g[0] / n as f64;
            accumulate(grads, *a, n, |ga| ga.iter_mut().for_each(|v| *v += s));
        }
        Op::RowSum(a) => {
            let av = &nodes[*a].value;
            let c = av.cols();
            accumulate(grads, *a, av.len(), |ga| {
                for (i, chunk) in ga.chunks_mut(c).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += g[i]);
                }
            });
        }
        Op::SelectCols(a, idx) => {
            let av = &nodes[*a].value;
            let c = av.cols();
            let w = idx.len();
            accumulate(grads, *a, av.len(), |ga| {
                for r in 0..av.rows() {
                    for (j, &src) in idx.iter().enumerate() {
                        ga[r * c + src] += g[r * w + j];
                    }
                }
            });
        }
        Op::ScatterCols(parts) => {
            let width = out.cols();
            let rows = out.rows();
            for (pid, idx) in parts {
                if !nodes[*pid].requires_grad {
                    continue;
                }
                let w = idx.len();
                accumulate(grads, *pid, rows * w, |gp| {
                    for r in 0..rows {
                        for (j, &dst) in idx.iter().enumerate() {
                            gp[r * w + j] += g[r * width + dst];
                        }
                    }
                });
            }
        }
        Op::SoftmaxCe { logits, labels, probs } => {
            let lv = &nodes[*logits].value;
            let k = lv.cols();
            let n = lv.rows();
            let s = g[0] / n as f64;
            accumulate(grads, *logits, lv.len(), |gl| {
                for r in 0..n {
                    for c in 0..k {
                        let target = if c == labels[r] { 1.0 } else { 0.0 };
                        gl[r * k + c] += s * (probs[r * k + c] - target);
                    }
                }
            });
        }
        Op::GaussLogDensity { x, mean, std } => {
            let xd = nodes[*x].value.data();
            let var = std * std;
            accumulate(grads, *x, xd.len(), |gx| {
                for i in 0..xd.len() {
                    gx[i] -= g[i] * (xd[i] - mean) / var;
                }
            });
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Current value (shared, not copied).
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    fn check_same_tape(&self, other: &Var<'t>, op: &str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract(format!("{op}: operands recorded on different tapes")))
        }
    }

    /// `(m,k) x (k,n)` matrix product.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(other, "matmul")?;
        let (av, bv) = (self.value(), other.value());
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", &av, &bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.tape.needs_grad(self.id) || self.tape.needs_grad(other.id);
        self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(self.id, other.id),
            rg,
            "matmul",
        )
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(other, "add")?;
        self.tape.binary(BinKind::Add, *self, *other)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(other, "sub")?;
        self.tape.binary(BinKind::Sub, *self, *other)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(other, "mul")?;
        self.tape.binary(BinKind::Mul, *self, *other)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Tanh, *self)
    }

    pub fn atan(&self) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Atan, *self)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Exp, *self)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Log, *self)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Sigmoid, *self)
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::LeakyRelu(slope), *self)
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(&self, p: f64) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Pow(p), *self)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Scale(c), *self)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::AddScalar(c), *self)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let v = self.value();
        let s: f64 = v.data().iter().sum();
        let rg = self.tape.needs_grad(self.id);
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), rg, "sum")
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.tape.needs_grad(self.id);
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), rg, "mean")
    }

    /// Per-row sum: `(rows, ...)` to `(rows,)`.
    pub fn row_sum(&self) -> Result<Var<'t>> {
        let v = self.value();
        let c = v.cols();
        let data: Vec<f64> = if c == 0 {
            vec![0.0; v.rows()]
        } else {
            v.data().chunks(c).map(|r| r.iter().sum()).collect()
        };
        let rg = self.tape.needs_grad(self.id);
        self.tape.push(
            Tensor::from_parts(vec![v.rows()], data),
            Op::RowSum(self.id),
            rg,
            "row_sum",
        )
    }

    /// Gathers columns: `out[:, j] = self[:, idx[j]]`.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let c = v.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::contract(format!(
                "select_cols: column {bad} out of range for width {c}"
            )));
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            let row = &v.data()[r * c..(r + 1) * c];
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let rg = self.tape.needs_grad(self.id);
        self.tape.push(
            Tensor::from_parts(vec![rows, idx.len()], data),
            Op::SelectCols(self.id, idx.to_vec()),
            rg,
            "select_cols",
        )
    }

    /// Contiguous column range `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (start..end).collect();
        self.select_cols(&idx)
    }

    /// Elementwise `log N(x; mean, std^2)`.
    pub fn gaussian_log_density(&self, mean: f64, std: f64) -> Result<Var<'t>> {
        if !(std > 0.0) {
            return Err(Error::domain(format!("gaussian_log_density needs std > 0, got {std}")));
        }
        let norm = -std.ln() - 0.5 * (2.0 * PI).ln();
        let out = self.value().map(|x| {
            let u = (x - mean) / std;
            -0.5 * u * u + norm
        });
        let rg = self.tape.needs_grad(self.id);
        self.tape.push(
            out,
            Op::GaussLogDensity { x: self.id, mean, std },
            rg,
            "gaussian_log_density",
        )
    }

    /// Mean softmax cross-entropy of `(n, k)` logits against integer labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape().len() != 2 || v.rows() != labels.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (v.rows(), v.cols());
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = v.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
            let lse = m + z.ln();
            for c in 0..k {
                probs[r * k + c] = (row[c] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        let rg = self.tape.needs_grad(self.id);
        self.tape.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCe {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            rg,
            "softmax_cross_entropy",
        )
    }
}

/// Places column blocks into a `(rows, width)` output.
///
/// `parts[i].1[j]` is the output column of input column `j` of
/// `parts[i].0`. Every output column must be written exactly once.
pub fn scatter_cols<'t>(parts: &[(Var<'t>, &[usize])], width: usize) -> Result<Var<'t>> {
    let tape = parts
        .first()
        .ok_or_else(|| Error::contract("scatter_cols of zero parts"))?
        .0
        .tape;
    let rows = parts[0].0.value().rows();
    let mut seen = vec![false; width];
    let mut data = vec![0.0; rows * width];
    let mut rg = false;
    for (var, idx) in parts {
        if !std::ptr::eq(var.tape, tape) {
            return Err(Error::contract("scatter_cols: parts on different tapes"));
        }
        let v = var.value();
        if v.rows() != rows || v.cols() != idx.len() {
            return Err(Error::Shape {
                op: "scatter_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![rows, idx.len()],
            });
        }
        for &dst in idx.iter() {
            if dst >= width || seen[dst] {
                return Err(Error::contract(format!(
                    "scatter_cols: column {dst} out of range or written twice"
                )));
            }
            seen[dst] = true;
        }
        let w = idx.len();
        for r in 0..rows {
            for (j, &dst) in idx.iter().enumerate() {
                data[r * width + dst] = v.data()[r * w + j];
            }
        }
        rg |= tape.needs_grad(var.id);
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::contract("scatter_cols: not every column was written"));
    }
    let op = Op::ScatterCols(parts.iter().map(|(v, idx)| (v.id, idx.to_vec())).collect());
    tape.push(Tensor::from_parts(vec![rows, width], data), op, rg, "scatter_cols")
}

/// Concatenates `(rows, w_i)` blocks side by side.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let mut offset = 0;
    let mut ranges = Vec::with_capacity(parts.len());
    for p in parts {
        let w = p.value().cols();
        ranges.push((offset..offset + w).collect::<Vec<_>>());
        offset += w;
    }
    let pairs: Vec<(Var<'t>, &[usize])> = parts.iter().zip(&ranges).map(|(v, r)| (*v, r.as_slice())).collect();
    scatter_cols(&pairs, offset)
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, usize>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if it was not reached.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    /// Gradient of a parameter bound on the tape, if it was bound.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        let &id = self.params.get(name)?;
        Some(
            self.grads[id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[id])),
        )
    }

    /// Gradient map covering every trainable entry of `params`.
    /// Entries that were never bound or never reached get exact zeros.
    pub fn for_params(&self, params: &ParamSet) -> GradMap {
        let mut map = GradMap::default();
        for entry in params.iter().filter(|e| e.trainable) {
            let g = self
                .param(&entry.name)
                .unwrap_or_else(|| Tensor::zeros(entry.value.shape()));
            map.insert(entry.name.clone(), g);
        }
        map
    }
}
