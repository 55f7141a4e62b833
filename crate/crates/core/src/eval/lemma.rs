use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::FlowModel;

/// First-order error at one latent step size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaRow {
    pub t: f64,
    pub error: f64,
    /// `error / t^2`, bounded when the remainder is second order.
    pub ratio: f64,
    /// False when the step crosses a leaky-relu kink, where `f` is not
    /// twice differentiable and the second-order bound need not hold.
    pub smooth: bool,
}

/// Jacobian of `f^-1` at the single input `x` by central differences.
pub fn numeric_jacobian(flow: &FlowModel, x: &Tensor, h: f64) -> Result<DMatrix<f64>> {
    let d = flow.dim();
    if x.len() != d {
        return Err(Error::contract(format!(
            "flow of dimension {d} given an input of {} values",
            x.len()
        )));
    }
    let base = x.data();
    let mut rows = Vec::with_capacity(2 * d * d);
    for j in 0..d {
        for sign in [1.0, -1.0] {
            let mut p = base.to_vec();
            p[j] += sign * h;
            rows.extend(p);
        }
    }
    let z = flow.encode(&Tensor::new(vec![2 * d, d], rows)?)?;
    Ok(DMatrix::from_fn(d, d, |i, j| {
        (z.row(2 * j)[i] - z.row(2 * j + 1)[i]) / (2.0 * h)
    }))
}

/// Exact Jacobian of `f^-1` at the single input `x`, one reverse pass per
/// output. Unlike [`numeric_jacobian`] it never mixes two linear pieces of
/// a leaky-relu flow.
pub fn jacobian(flow: &FlowModel, x: &Tensor) -> Result<DMatrix<f64>> {
    let d = flow.dim();
    if x.len() != d {
        return Err(Error::contract(format!(
            "flow of dimension {d} given an input of {} values",
            x.len()
        )));
    }
    let x = x.clone().flatten_rows();
    let mut jac = DMatrix::zeros(d, d);
    for i in 0..d {
        let tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let (z, _) = flow.inverse_var(&tape, flow.params(), xv)?;
        let grads = tape.backward(z.select_cols(&[i])?.sum()?)?;
        for (j, g) in grads.wrt(&xv).data().iter().enumerate() {
            jac[(i, j)] = *g;
        }
    }
    Ok(jac)
}

/// For each `t` in `scales`, compares `f(f^-1(x) + t v)` with its
/// linearization `x + t J^-1 v`, where `J` is the Jacobian of `f^-1` at `x`.
pub fn lemma1_check(flow: &FlowModel, x: &Tensor, direction: &[f64], scales: &[f64]) -> Result<Vec<LemmaRow>> {
    let d = flow.dim();
    if direction.len() != d {
        return Err(Error::contract(format!(
            "direction of length {} for a {d}-dimensional flow",
            direction.len()
        )));
    }
    if scales.is_empty() || scales.iter().any(|&t| !(t > 0.0)) || scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::contract("scales must be positive and strictly decreasing"));
    }
    let x = x.clone().flatten_rows();
    let jac = jacobian(flow, &x)?;
    let sv = jac.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < 1e12) {
        return Err(Error::Singular { ridge: 0.0, condition });
    }
    let dv = DVector::from_row_slice(direction);
    let dx = jac.lu().solve(&dv).ok_or(Error::Singular { ridge: 0.0, condition })?;
    let z0 = flow.encode(&x)?;
    let mut zs = Vec::with_capacity(scales.len() * d);
    for &t in scales {
        zs.extend(z0.data().iter().zip(direction).map(|(z, v)| z + t * v));
    }
    let zs = Tensor::new(vec![scales.len(), d], zs)?;
    let base_sig = flow.kink_signature(&z0)?;
    let out = flow.decode(&zs)?.flatten_rows();
    scales
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let error = out
                .row(k)
                .iter()
                .zip(x.data())
                .zip(dx.iter())
                .map(|((o, xi), di)| (o - xi - t * di).powi(2))
                .sum::<f64>()
                .sqrt();
            let smooth = flow.kink_signature(&zs.select_rows(&[k]))? == base_sig;
            Ok(LemmaRow {
                t,
                error,
                ratio: error / (t * t),
                smooth,
            })
        })
        .collect()
}
