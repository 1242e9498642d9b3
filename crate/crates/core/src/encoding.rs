//! Network inputs: normalised `(x, y, alpha)` samples on a pixel grid and their
//! sin/cos frequency embedding.

use std::f64::consts::PI;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Real};

/// Positional/angular samples, every channel in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordBatch {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl CoordBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Embedded inputs stored `N x (6L + 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch<T> {
    pub gamma: DenseArray<T>,
    pub embedding_size: usize,
}

impl<T: Real> EncodedBatch<T> {
    pub fn len(&self) -> usize {
        self.gamma.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }
}

pub fn encoded_width(embedding_size: usize) -> usize {
    6 * embedding_size + 3
}

/// Maps `index` in `0..count` onto `[-1, 1]`; a single sample sits at 0.
fn unit_coord(index: usize, count: usize) -> f64 {
    if count <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * index as f64 / (count - 1) as f64
    }
}

/// Affine map of an angle in degrees from `[min, max]` onto `[-1, 1]`.
pub fn normalize_angle(angle_deg: f64, min_deg: f64, max_deg: f64) -> f64 {
    if max_deg <= min_deg {
        0.0
    } else {
        -1.0 + 2.0 * (angle_deg - min_deg) / (max_deg - min_deg)
    }
}

/// Coordinates for rows `rows` of a `height x width` image, in row-major
/// order. `y` is normalised over the full image height so that a stripe and the
/// full image agree on every pixel's coordinate.
pub fn grid_coords(height: usize, width: usize, rows: Range<usize>, angle_norm: f64) -> Result<CoordBatch> {
    if rows.start >= rows.end || rows.end > height || width == 0 {
        return Err(Error::contract(format!(
            "empty or out-of-range grid: rows {rows:?} of height {height}, width {width}"
        )));
    }
    if !(-1.0..=1.0).contains(&angle_norm) {
        return Err(Error::contract(format!(
            "normalised angle {angle_norm} outside [-1, 1]"
        )));
    }
    let n = rows.len() * width;
    let mut batch = CoordBatch {
        x: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        alpha: vec![angle_norm; n],
    };
    for r in rows {
        let y = unit_coord(r, height);
        for c in 0..width {
            batch.x.push(unit_coord(c, width));
            batch.y.push(y);
        }
    }
    Ok(batch)
}

/// `[q, sin(2^0 pi q), cos(2^0 pi q), ..., sin(2^(L-1) pi q), cos(2^(L-1) pi q)]`
/// per sample, where each `sin`/`cos` block covers the three channels.
pub fn positional_encode<T: Real>(batch: &CoordBatch, embedding_size: usize) -> Result<EncodedBatch<T>> {
    if embedding_size == 0 {
        return Err(Error::contract("embedding size must be at least 1"));
    }
    let width = encoded_width(embedding_size);
    let n = batch.len();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        let q = [batch.x[i], batch.y[i], batch.alpha[i]];
        data.extend(q.iter().map(|&v| T::lit(v)));
        let mut freq = PI;
        for _ in 0..embedding_size {
            data.extend(q.iter().map(|&v| T::lit((freq * v).sin())));
            data.extend(q.iter().map(|&v| T::lit((freq * v).cos())));
            freq *= 2.0;
        }
    }
    Ok(EncodedBatch {
        gamma: DenseArray::new([n, width], data)?,
        embedding_size,
    })
}
