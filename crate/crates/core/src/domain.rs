//! Valid data ranges and the l-infinity feasible set.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Closed elementwise data range `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const UNIT: Bounds = Bounds { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::contract(format!("invalid data bounds [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clip(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// Upper edge `a + eps`, nudged down until `edge - a <= eps` holds in floating point.
fn upper_edge(a: f64, eps: f64) -> f64 {
    let mut e = a + eps;
    while e - a > eps {
        e = e.next_down();
    }
    e
}

fn lower_edge(a: f64, eps: f64) -> f64 {
    let mut e = a - eps;
    while a - e > eps {
        e = e.next_up();
    }
    e
}

/// Projects `candidate` onto the l-infinity ball of radius `eps` around
/// `anchor`, then clips to `bounds`.
///
/// The ball constraint holds exactly as evaluated in floating point:
/// `(out - anchor).abs() <= eps` for every element whose anchor lies in
/// `bounds`.
pub fn project_linf(candidate: &Tensor, anchor: &Tensor, eps: f64, bounds: Bounds) -> Result<Tensor> {
    if candidate.shape() != anchor.shape() {
        return Err(Error::Shape {
            op: "project_linf",
            lhs: candidate.shape().to_vec(),
            rhs: anchor.shape().to_vec(),
        });
    }
    if !(eps >= 0.0) {
        return Err(Error::contract(format!("epsilon must be non-negative, got {eps}")));
    }
    candidate.zip_with(anchor, |c, a| {
        let v = c.clamp(lower_edge(a, eps), upper_edge(a, eps));
        bounds.clip(v)
    })
}

/// Largest absolute elementwise difference.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}
