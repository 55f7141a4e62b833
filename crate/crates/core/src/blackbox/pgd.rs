use super::classifier::ToyClassifier;
use crate::diffcore::{Tape, Tensor};
use crate::domain::{project_linf, Bounds};
use crate::error::{Error, Result};

/// White-box l-infinity PGD without random start.
///
/// Each iteration takes a signed-gradient ascent step on the
/// cross-entropy, then projects onto the `epsilon` ball around `x` and
/// clips to `bounds`. The output has the shape of `x`.
pub fn pgd_attack(
    clf: &ToyClassifier,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    step: f64,
    iters: usize,
    bounds: Bounds,
) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::contract(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let shape = x.shape().to_vec();
    let anchor = x.clone().flatten_rows();
    let mut adv = anchor.clone();
    for _ in 0..iters {
        let tape = Tape::new();
        let v = tape.input(adv.clone())?;
        let loss = clf.loss_var(&tape, clf.params(), v, y)?;
        let g = tape.backward(loss)?.wrt(&v);
        let stepped = adv.zip_with(&g, |a, gi| a + step * sign(gi))?;
        adv = project_linf(&stepped, &anchor, epsilon, bounds)?;
    }
    if iters == 0 {
        adv = project_linf(&adv, &anchor, epsilon, bounds)?;
    }
    adv.reshape(shape)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
