//! Candidate maps from search space to input space.

use crate::diffcore::Tensor;
use crate::domain::Bounds;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::resample::resize_bilinear;

/// Unit-box inputs are clamped to `[TANH_SHRINK, 1 - TANH_SHRINK]` before
/// `atanh` so saturated pixels keep a finite anchor.
pub const TANH_SHRINK: f64 = 1e-4;

/// Maps search-space points to (unprojected) candidate inputs.
pub trait CandidateMap: Sync {
    /// Search-space point of the clean input.
    fn anchor(&self) -> &[f64];

    /// `(n, d)` search points to `(n, D)` flattened candidates.
    fn map(&self, z: &Tensor) -> Result<Tensor>;
}

fn single_row(x: &Tensor) -> Result<()> {
    if x.rows() != 1 || x.shape().len() < 2 {
        return Err(Error::contract(format!(
            "attacks take one input with a leading batch axis, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// `z -> f(z)` through a trained flow.
pub struct FlowMap<'f> {
    flow: &'f FlowModel,
    z_clean: Vec<f64>,
}

impl<'f> FlowMap<'f> {
    pub fn new(flow: &'f FlowModel, x: &Tensor) -> Result<Self> {
        single_row(x)?;
        if x.cols() != flow.dim() {
            return Err(Error::contract(format!(
                "flow of dimension {} cannot encode an input with {} features",
                flow.dim(),
                x.cols()
            )));
        }
        let z_clean = flow.encode(x)?.into_data();
        Ok(Self { flow, z_clean })
    }
}

impl CandidateMap for FlowMap<'_> {
    fn anchor(&self) -> &[f64] {
        &self.z_clean
    }

    fn map(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.flow.decode(z)?.flatten_rows())
    }
}

/// Elementwise `lo + (hi - lo) (tanh(z) + 1) / 2`.
pub struct TanhMap {
    bounds: Bounds,
    z_clean: Vec<f64>,
}

impl TanhMap {
    pub fn new(x: &Tensor, bounds: Bounds) -> Result<Self> {
        single_row(x)?;
        let z_clean = x
            .data()
            .iter()
            .map(|&v| {
                let u = ((v - bounds.lo) / bounds.width()).clamp(TANH_SHRINK, 1.0 - TANH_SHRINK);
                (2.0 * u - 1.0).atanh()
            })
            .collect();
        Ok(Self { bounds, z_clean })
    }
}

impl CandidateMap for TanhMap {
    fn anchor(&self) -> &[f64] {
        &self.z_clean
    }

    fn map(&self, z: &Tensor) -> Result<Tensor> {
        let (lo, w) = (self.bounds.lo, self.bounds.width());
        Ok(z.map(|v| lo + w * 0.5 * (v.tanh() + 1.0)).flatten_rows())
    }
}

/// A low-resolution flow whose output differences are upsampled and added
/// to the full-resolution input: `x + up(f(z) - x_low)`.
pub struct HighResMap<'f> {
    flow: &'f FlowModel,
    x: Tensor,
    x_low: Tensor,
    high: [usize; 3],
    z_clean: Vec<f64>,
}

impl<'f> HighResMap<'f> {
    /// `x` is a `(1, c, H, W)` image; the flow's image shape fixes the low resolution.
    pub fn new(flow: &'f FlowModel, x: &Tensor) -> Result<Self> {
        let &[1, c, h, w] = x.shape() else {
            return Err(Error::contract(format!(
                "high-resolution attack takes a (1, c, h, w) image, got {:?}",
                x.shape()
            )));
        };
        let Some([fc, fh, fw]) = flow.image_shape() else {
            return Err(Error::contract("high-resolution attack needs an image flow"));
        };
        if fc != c || fh > h || fw > w {
            return Err(Error::contract(format!(
                "flow resolution {fc}x{fh}x{fw} does not fit below input {c}x{h}x{w}"
            )));
        }
        let x_low = resize_bilinear(x, fh, fw)?;
        let z_clean = flow.encode(&x_low)?.into_data();
        Ok(Self {
            flow,
            x: x.clone(),
            x_low,
            high: [c, h, w],
            z_clean,
        })
    }

    fn same_resolution(&self) -> bool {
        self.x_low.shape() == self.x.shape()
    }
}

impl CandidateMap for HighResMap<'_> {
    fn anchor(&self) -> &[f64] {
        &self.z_clean
    }

    fn map(&self, z: &Tensor) -> Result<Tensor> {
        let f = self.flow.decode(z)?;
        if self.same_resolution() {
            // x + (f - x) is f up to rounding; keep the native path exact.
            return Ok(f.flatten_rows());
        }
        let low = self.x_low.data();
        let gamma = f.zip_with_rows(low, |a, b| a - b)?;
        let [_, h, w] = self.high;
        let up = resize_bilinear(&gamma, h, w)?;
        up.zip_with_rows(self.x.data(), |g, x| x + g).map(Tensor::flatten_rows)
    }
}
