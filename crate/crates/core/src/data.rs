//! Desk-scale datasets: two-moons, Gaussian blobs and procedurally rendered digits.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::domain::Bounds;
use crate::error::{Error, Result};

/// Inputs, integer labels and the valid data range.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
    pub bounds: Bounds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    TwoMoons,
    Blobs,
    Digits8,
    Digits16,
}

impl std::str::FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-moons" => Ok(DataKind::TwoMoons),
            "blobs" => Ok(DataKind::Blobs),
            "digits8" => Ok(DataKind::Digits8),
            "digits16" => Ok(DataKind::Digits16),
            other => Err(Error::Config(format!(
                "unknown data kind {other:?} (expected two-moons, blobs, digits8, digits16)"
            ))),
        }
    }
}

impl DataKind {
    pub fn name(&self) -> &'static str {
        match self {
            DataKind::TwoMoons => "two-moons",
            DataKind::Blobs => "blobs",
            DataKind::Digits8 => "digits8",
            DataKind::Digits16 => "digits16",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DataKind::TwoMoons | DataKind::Blobs => 2,
            DataKind::Digits8 | DataKind::Digits16 => 10,
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::contract("dataset size must be at least 1"));
        }
        Ok(match self {
            DataKind::TwoMoons => two_moons(n, 0.1, rng),
            DataKind::Blobs => blobs(n, rng),
            DataKind::Digits8 => digits(n, 8, rng),
            DataKind::Digits16 => digits(n, 16, rng),
        })
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
            bounds: self.bounds,
        }
    }

    /// Shuffled split with `round(frac * n)` rows in the first part.
    pub fn split<R: Rng + ?Sized>(&self, frac: f64, rng: &mut R) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let k = ((self.len() as f64) * frac).round() as usize;
        (self.subset(&idx[..k]), self.subset(&idx[k..]))
    }

    /// Labels as an `f32`-storable `(n,)` tensor.
    pub fn labels_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len()], self.y.iter().map(|&v| v as f64).collect()).expect("labels are finite")
    }

    /// Rebuilds a dataset from stored inputs and a label tensor.
    pub fn from_tensors(x: Tensor, labels: &Tensor, num_classes: usize, bounds: Bounds) -> Result<Self> {
        if labels.len() != x.rows() {
            return Err(Error::contract(format!(
                "{} labels for {} inputs",
                labels.len(),
                x.rows()
            )));
        }
        let y = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < num_classes {
                    Ok(v as usize)
                } else {
                    Err(Error::contract(format!("invalid label {v} for {num_classes} classes")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            x,
            y,
            num_classes,
            bounds,
        })
    }
}

/// Interleaving half-circles, mapped into the unit square by `(v + 1.5) / 4`.
pub fn two_moons<R: Rng + ?Sized>(n: usize, noise: f64, rng: &mut R) -> Dataset {
    let normal = Normal::new(0.0, noise.max(0.0) + f64::MIN_POSITIVE).unwrap();
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (a, b) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let a = a + normal.sample(rng);
        let b = b + normal.sample(rng);
        data.push(Bounds::UNIT.clip((a + 1.5) / 4.0));
        data.push(Bounds::UNIT.clip((b + 1.5) / 4.0));
        y.push(label);
    }
    Dataset {
        x: Tensor::new(vec![n, 2], data).expect("finite"),
        y,
        num_classes: 2,
        bounds: Bounds::UNIT,
    }
}

/// Two isotropic Gaussian clusters at (0.3, 0.3) and (0.7, 0.7), std 0.06.
pub fn blobs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Dataset {
    let normal = Normal::new(0.0, 0.05).unwrap();
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let c = if label == 0 { 0.3 } else { 0.7 };
        data.push(Bounds::UNIT.clip(c + normal.sample(rng)));
        data.push(Bounds::UNIT.clip(c + normal.sample(rng)));
        y.push(label);
    }
    Dataset {
        x: Tensor::new(vec![n, 2], data).expect("finite"),
        y,
        num_classes: 2,
        bounds: Bounds::UNIT,
    }
}

const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

/// Glyph bitmap with per-cell stroke dropout and spurious ink, so that
/// instances of one digit differ in topology as well as geometry.
fn jittered_glyph<R: Rng + ?Sized>(digit: usize, rng: &mut R) -> [[bool; 5]; 7] {
    let mut g = [[false; 5]; 7];
    for (r, row) in GLYPHS[digit].iter().enumerate() {
        for (c, b) in row.bytes().enumerate() {
            let lit = b == b'1';
            g[r][c] = if lit {
                rng.random::<f64>() >= DROPOUT
            } else {
                rng.random::<f64>() < SPURIOUS
            };
        }
    }
    g
}

const DROPOUT: f64 = 0.08;
const SPURIOUS: f64 = 0.02;

fn glyph_at(g: &[[bool; 5]; 7], gx: f64, gy: f64) -> f64 {
    if !(0.0..5.0).contains(&gx) || !(0.0..7.0).contains(&gy) {
        return 0.0;
    }
    f64::from(g[gy as usize][gx as usize])
}

/// Renders one `size x size` digit image with random placement, rotation,
/// shear, stroke defects, intensity, blur and sensor noise.
fn render_digit<R: Rng + ?Sized>(digit: usize, size: usize, rng: &mut R) -> Vec<f64> {
    const SS: usize = 4;
    let mut centred = || rng.random::<f64>() - 0.5;
    let s = size as f64;
    let h = 0.78 * (1.0 + 0.3 * centred());
    let w = h * (5.0 / 7.0) * (1.0 + 0.4 * centred());
    let cx = 0.5 + 0.2 * centred();
    let cy = 0.5 + 0.2 * centred();
    let shear = 0.6 * centred();
    let (sin, cos) = (0.4 * centred()).sin_cos();
    let g = jittered_glyph(digit, rng);
    let mut img = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let mut acc = 0.0;
            for a in 0..SS {
                for b in 0..SS {
                    let v = (i as f64 + (a as f64 + 0.5) / SS as f64) / s - cy;
                    let u = (j as f64 + (b as f64 + 0.5) / SS as f64) / s - cx;
                    let (u, v) = (cos * u + sin * v, -sin * u + cos * v);
                    let gy = v / h * 7.0 + 3.5;
                    let gx = u / w * 5.0 + 2.5 + shear * (gy - 3.5);
                    acc += glyph_at(&g, gx, gy);
                }
            }
            img[i * size + j] = acc / (SS * SS) as f64;
        }
    }
    let blurred = blur3(&img, size);
    let mix = 0.3 + 0.5 * rng.random::<f64>();
    let ink = 0.45 + 0.5 * rng.random::<f64>();
    let bg = 0.2 * rng.random::<f64>();
    let noise = Normal::new(0.0, 0.05).unwrap();
    img.iter()
        .zip(&blurred)
        .map(|(&sharp, &soft)| {
            let v = (1.0 - mix) * sharp + mix * soft;
            Bounds::UNIT.clip(bg + (ink - bg) * v + noise.sample(rng))
        })
        .collect()
}

/// Separable `[1, 2, 1] / 4` blur with edge replication.
fn blur3(img: &[f64], size: usize) -> Vec<f64> {
    let at = |i: isize, j: isize| {
        let c = |k: isize| k.clamp(0, size as isize - 1) as usize;
        img[c(i) * size + c(j)]
    };
    let mut out = vec![0.0; size * size];
    for i in 0..size as isize {
        for j in 0..size as isize {
            let mut acc = 0.0;
            for (di, wi) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
                for (dj, wj) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
                    acc += wi * wj * at(i + di, j + dj);
                }
            }
            out[i as usize * size + j as usize] = acc / 16.0;
        }
    }
    out
}

/// `n` grayscale digit images of shape `(n, 1, size, size)` in `[0, 1]`.
pub fn digits<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Dataset {
    let mut data = Vec::with_capacity(n * size * size);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        data.extend(render_digit(label, size, rng));
        y.push(label);
    }
    Dataset {
        x: Tensor::new(vec![n, 1, size, size], data).expect("finite"),
        y,
        num_classes: 10,
        bounds: Bounds::UNIT,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn generators_stay_in_bounds() {
        for kind in [DataKind::TwoMoons, DataKind::Blobs, DataKind::Digits8] {
            let d = kind.generate(50, &mut stream(0, "data")).unwrap();
            assert!(d.x.data().iter().all(|&v| d.bounds.contains(v)));
            assert_eq!(d.len(), 50);
            assert!(d.y.iter().all(|&c| c < d.num_classes));
        }
    }

    #[test]
    fn digits_have_image_shape() {
        let d = DataKind::Digits16.generate(3, &mut stream(0, "data")).unwrap();
        assert_eq!(d.x.shape(), &[3, 1, 16, 16]);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = DataKind::TwoMoons.generate(4, &mut stream(0, "data")).unwrap();
        let b = DataKind::TwoMoons.generate(4, &mut stream(0, "data")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_round_trip() {
        let d = DataKind::Blobs.generate(6, &mut stream(1, "data")).unwrap();
        let back = Dataset::from_tensors(d.x.clone(), &d.labels_tensor(), 2, d.bounds).unwrap();
        assert_eq!(back, d);
    }
}
