//! Point-spread-function rendering: the intermediate intensity image `o` is
//! blurred with a fixed anisotropic Gaussian to give the rendered image `o'`.
//!
//! The axial axis is the row (depth) axis and the lateral axis is the column
//! axis. Both 1-D kernels are normalised to unit sum, so brightness and the
//! dB calibration of the images are preserved.

use crate::error::{Error, Result};
use crate::numerics::ops::{self, SeparableKernel};
use crate::numerics::{DenseArray, NodeId, Real, Tape};

pub const DEFAULT_AXIAL_SIGMA: f64 = 2.0;
pub const DEFAULT_LATERAL_SIGMA: f64 = 4.0;
pub const DEFAULT_KERNEL_SIZE: usize = 11;

/// Unit-sum sampled Gaussian `exp(-(i - c)^2 / (2 sigma^2))`, `c` the centre tap.
pub fn gaussian_taps(sigma: f64, size: usize) -> Result<Vec<f64>> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::contract(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!("kernel sigma must be positive, got {sigma}")));
    }
    let centre = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Separable anisotropic Gaussian PSF.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    axial_sigma: f64,
    lateral_sigma: f64,
    size: usize,
    taps: SeparableKernel<f64>,
}

impl PsfKernel {
    pub fn new(axial_sigma: f64, lateral_sigma: f64, size: usize) -> Result<Self> {
        let axial = gaussian_taps(axial_sigma, size)?;
        let lateral = gaussian_taps(lateral_sigma, size)?;
        Ok(Self {
            axial_sigma,
            lateral_sigma,
            size,
            taps: SeparableKernel::new(axial, lateral)?,
        })
    }

    /// 11x11 kernel with axial sigma 2 px and lateral sigma 4 px.
    pub fn standard() -> Self {
        Self::new(DEFAULT_AXIAL_SIGMA, DEFAULT_LATERAL_SIGMA, DEFAULT_KERNEL_SIZE)
            .expect("default PSF parameters are valid")
    }

    /// 1x1 unit kernel; rendering with it is the identity.
    pub fn identity() -> Self {
        Self {
            axial_sigma: 0.0,
            lateral_sigma: 0.0,
            size: 1,
            taps: SeparableKernel::new(vec![1.0], vec![1.0]).expect("odd"),
        }
    }

    pub fn axial_sigma(&self) -> f64 {
        self.axial_sigma
    }

    pub fn lateral_sigma(&self) -> f64 {
        self.lateral_sigma
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn axial_taps(&self) -> &[f64] {
        self.taps.vertical()
    }

    pub fn lateral_taps(&self) -> &[f64] {
        self.taps.horizontal()
    }

    /// Dense `size x size` kernel (outer product of axial and lateral taps).
    pub fn full(&self) -> DenseArray<f64> {
        self.taps.outer()
    }

    pub fn separable<T: Real>(&self) -> SeparableKernel<T> {
        self.taps.cast()
    }
}

impl Default for PsfKernel {
    fn default() -> Self {
        Self::standard()
    }
}

/// `o' = o * k` on an image-shaped `o`.
pub fn render<T: Real>(o: &DenseArray<T>, kernel: &PsfKernel) -> Result<DenseArray<T>> {
    ops::conv2d_separable(o, &kernel.separable())
}

/// Tape-recorded [`render`].
pub fn render_on_tape<T: Real>(tape: &mut Tape<T>, o: NodeId, kernel: &PsfKernel) -> Result<NodeId> {
    tape.conv2d_separable(o, &kernel.separable())
}
