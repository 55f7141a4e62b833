//! Central finite-difference verification of backward gradients.

use std::collections::HashMap;

use super::params::{GradMap, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominators below this are treated as this value, so parameters whose
/// true gradient is numerically zero are compared in absolute terms.
pub const DEVIATION_FLOOR: f64 = 1e-8;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(name, max relative deviation)` per trainable parameter.
    pub per_param: Vec<(String, f64)>,
    /// Elements whose finite difference crossed a leaky-relu kink and were skipped.
    pub skipped: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_deviation(&self) -> f64 {
        self.per_param.iter().fold(0.0, |m, (_, d)| m.max(*d))
    }
}

/// Finite-difference gradients plus a mask of skipped elements.
#[derive(Clone, Debug, Default)]
pub struct FdGradients {
    pub grads: GradMap,
    pub skipped: HashMap<String, Vec<bool>>,
}

fn eval_loss<F>(f: &mut F, params: &ParamSet) -> Result<(f64, u64)>
where
    F: for<'t> FnMut(&'t Tape, &ParamSet) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let loss = f(&tape, params)?;
    let v = loss.value();
    if v.len() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok((v.data()[0], tape.kink_signature()))
}

/// Central differences `(f(p+h) - f(p-h)) / 2h` for every trainable element.
///
/// An element is skipped when either perturbed evaluation takes a
/// different leaky-relu branch than the unperturbed one, because the
/// difference quotient then straddles a kink.
pub fn finite_difference_gradients<F>(mut f: F, params: &ParamSet, step: f64) -> Result<FdGradients>
where
    F: for<'t> FnMut(&'t Tape, &ParamSet) -> Result<Var<'t>>,
{
    let (_, base_sig) = eval_loss(&mut f, params)?;
    let mut out = FdGradients::default();
    let mut work = params.clone();
    for entry in params.iter().filter(|e| e.trainable) {
        let orig = entry.value.as_ref().clone();
        let mut grad = vec![0.0; orig.len()];
        let mut skip = vec![false; orig.len()];
        for i in 0..orig.len() {
            let mut plus = orig.clone();
            plus.data_mut()[i] += step;
            work.overwrite(&entry.name, plus)?;
            let (lp, sp) = eval_loss(&mut f, &work)?;
            let mut minus = orig.clone();
            minus.data_mut()[i] -= step;
            work.overwrite(&entry.name, minus)?;
            let (lm, sm) = eval_loss(&mut f, &work)?;
            if sp != base_sig || sm != base_sig {
                skip[i] = true;
            } else {
                grad[i] = (lp - lm) / (2.0 * step);
            }
        }
        work.overwrite(&entry.name, orig.clone())?;
        out.grads
            .insert(entry.name.clone(), Tensor::new(orig.shape().to_vec(), grad)?);
        out.skipped.insert(entry.name.clone(), skip);
    }
    Ok(out)
}

/// Per-parameter `max|a-b| / max(max|a|, max|b|)` over unskipped elements.
pub fn compare_gradients(analytic: &GradMap, numeric: &FdGradients) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (name, num) in numeric.grads.iter() {
        let ana = analytic
            .get(name)
            .ok_or_else(|| Error::contract(format!("no analytic gradient for {name:?}")))?;
        if ana.shape() != num.shape() {
            return Err(Error::Shape {
                op: "compare_gradients",
                lhs: ana.shape().to_vec(),
                rhs: num.shape().to_vec(),
            });
        }
        let skip = numeric.skipped.get(name);
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for (i, (a, b)) in ana.data().iter().zip(num.data()).enumerate() {
            if skip.is_some_and(|s| s[i]) {
                continue;
            }
            diff = diff.max((a - b).abs());
            scale = scale.max(a.abs()).max(b.abs());
        }
        let dev = if diff == 0.0 {
            0.0
        } else {
            diff / scale.max(DEVIATION_FLOOR)
        };
        out.push((name.to_string(), dev));
    }
    Ok(out)
}

/// Backward gradients of `f` for every trainable parameter.
pub fn analytic_gradients<F>(mut f: F, params: &ParamSet) -> Result<GradMap>
where
    F: for<'t> FnMut(&'t Tape, &ParamSet) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let loss = f(&tape, params)?;
    Ok(tape.backward(loss)?.for_params(params))
}

/// Compares backward gradients against central finite differences.
pub fn grad_check<F>(mut f: F, params: &ParamSet, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> FnMut(&'t Tape, &ParamSet) -> Result<Var<'t>>,
{
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::contract(format!(
            "grad_check step must lie in (0, 1), got {step}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::contract(format!("grad_check tol must be positive, got {tol}")));
    }
    let analytic = analytic_gradients(&mut f, params)?;
    let numeric = finite_difference_gradients(&mut f, params, step)?;
    let per_param = compare_gradients(&analytic, &numeric)?;
    let skipped = numeric.skipped.values().map(|s| s.iter().filter(|&&b| b).count()).sum();
    let passed = per_param.iter().all(|(_, d)| *d <= tol);
    Ok(GradCheckReport {
        per_param,
        skipped,
        tol,
        passed,
    })
}
