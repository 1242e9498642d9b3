//! Compact implicit neural representations for plane-wave ultrasound.
//!
//! A coordinate MLP maps `(x, y, alpha)` (lateral position, axial position,
//! steering angle) through a frequency positional encoding to an intermediate
//! intensity `o`. A fixed anisotropic Gaussian point-spread function turns `o`
//! into the rendered intensity `o'`, which is trained against beamformed
//! plane-wave images with a mixed SSIM/MSE objective.
//!
//! Module map:
//!
//! - [`numerics`]: dense arrays, the small set of differentiable primitives,
//!   and the reverse-mode tape that trains everything else.
//! - [`encoding`]: pixel-grid coordinates and the sin/cos embedding.
//! - [`model`]: the MLP, its initialisation and the `PWIN` weight file.
//! - [`render`]: PSF kernel construction and rendering.
//! - [`objective`]: MSE, SSIM and the combined training loss.
//! - [`trainer`]: stripe batching, Adam, view selection and checkpoints.
//! - [`data_io`]: the `PWST` stack format, dB conversion, image export,
//!   synthetic phantoms and compression accounting.
//! - [`metrics`]: SSIM, PSNR, FWHM, CNR and SNR over declarative ROIs.

pub mod data_io;
pub mod encoding;
mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod render;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{DenseArray, Real};
