//! Bilinear resampling of `(n, c, h, w)` image batches.
//!
//! Sample positions use pixel centres, so resizing to the same size is the
//! identity and a factor-two reduction averages 2x2 blocks.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, p - lo as f64)
        })
        .collect()
}

/// Resizes every channel of a `(n, c, h, w)` batch to `(h2, w2)`.
pub fn resize_bilinear(x: &Tensor, h2: usize, w2: usize) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::contract(format!(
            "resize expects a (n, c, h, w) batch, got {:?}",
            x.shape()
        )));
    };
    if h == 0 || w == 0 || h2 == 0 || w2 == 0 {
        return Err(Error::contract("resize with an empty spatial extent"));
    }
    if (h, w) == (h2, w2) {
        return Ok(x.clone());
    }
    let (ry, rx) = (axis_weights(h, h2), axis_weights(w, w2));
    let mut out = Vec::with_capacity(n * c * h2 * w2);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, fy) in &ry {
            for &(x0, x1, fx) in &rx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}
