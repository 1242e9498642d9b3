//! Training objective: `lambda * (1 - mean SSIM) + (1 - lambda) * MSE`.
//!
//! SSIM uses a Gaussian window with replicate padding, so the SSIM map has the
//! same size as its inputs. The windowed statistics are
//! `mu = w * x`, `sigma_x^2 = w * x^2 - mu_x^2` and
//! `sigma_xy = w * (x y) - mu_x mu_y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{self, SeparableKernel};
use crate::numerics::{DenseArray, NodeId, Real, Tape};
use crate::render::gaussian_taps;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.75,
            ssim_window: 11,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::contract(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.ssim_window % 2 == 0 {
            return Err(Error::contract(format!("SSIM window {} must be odd", self.ssim_window)));
        }
        if !(self.data_range > 0.0) {
            return Err(Error::contract("data range must be positive"));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn window<T: Real>(&self) -> Result<SeparableKernel<T>> {
        let taps = gaussian_taps(self.ssim_sigma, self.ssim_window)?;
        SeparableKernel::new(taps.clone(), taps).map(|k| k.cast())
    }
}

fn check_pair<T: Real>(op: &'static str, pred: &DenseArray<T>, gt: &DenseArray<T>, min_dim: usize) -> Result<()> {
    let (h, w) = pred.dims2(op)?;
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            op,
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    if h < min_dim || w < min_dim {
        return Err(Error::dim(op, format!("image {h}x{w} smaller than window {min_dim}")));
    }
    Ok(())
}

pub fn mse_loss<T: Real>(pred: &DenseArray<T>, gt: &DenseArray<T>) -> Result<T> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            "mse_loss",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    Ok(ops::square(&ops::sub(pred, gt)?).mean())
}

/// Per-pixel SSIM.
pub fn ssim_map<T: Real>(pred: &DenseArray<T>, gt: &DenseArray<T>, cfg: &LossConfig) -> Result<DenseArray<T>> {
    cfg.validate()?;
    check_pair("ssim_map", pred, gt, cfg.ssim_window)?;
    let win = cfg.window::<T>()?;
    let blur = |a: &DenseArray<T>| ops::conv2d_separable(a, &win);
    let two = T::lit(2.0);
    let c1 = T::lit(cfg.c1());
    let c2 = T::lit(cfg.c2());

    let mu_x = blur(pred)?;
    let mu_y = blur(gt)?;
    let xx = blur(&ops::square(pred))?;
    let yy = blur(&ops::square(gt))?;
    let xy = blur(&ops::mul(pred, gt)?)?;

    let data = (0..pred.len())
        .map(|i| {
            let (mx, my) = (mu_x.data()[i], mu_y.data()[i]);
            let vx = xx.data()[i] - mx * mx;
            let vy = yy.data()[i] - my * my;
            let cxy = xy.data()[i] - mx * my;
            ((two * mx * my + c1) * (two * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .collect();
    DenseArray::new(pred.shape().to_vec(), data)?.ensure_finite("ssim_map")
}

pub fn ssim_loss<T: Real>(pred: &DenseArray<T>, gt: &DenseArray<T>, cfg: &LossConfig) -> Result<T> {
    Ok(T::one() - ssim_map(pred, gt, cfg)?.mean())
}

pub fn combined_loss<T: Real>(pred: &DenseArray<T>, gt: &DenseArray<T>, cfg: &LossConfig) -> Result<T> {
    let lambda = T::lit(cfg.lambda);
    let mut total = T::zero();
    // Exact boundary values at lambda = 0 and 1.
    if cfg.lambda > 0.0 {
        total = total + lambda * ssim_loss(pred, gt, cfg)?;
    }
    if cfg.lambda < 1.0 {
        total = total + (T::one() - lambda) * mse_loss(pred, gt)?;
    }
    Ok(total)
}

pub fn mse_loss_on_tape<T: Real>(tape: &mut Tape<T>, pred: NodeId, gt: NodeId) -> Result<NodeId> {
    let d = tape.sub(pred, gt)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

pub fn ssim_map_on_tape<T: Real>(tape: &mut Tape<T>, pred: NodeId, gt: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    check_pair("ssim_map", tape.value(pred), tape.value(gt), cfg.ssim_window)?;
    let win = cfg.window::<T>()?;
    let c1 = T::lit(cfg.c1());
    let c2 = T::lit(cfg.c2());
    let two = T::lit(2.0);

    let mu_x = tape.conv2d_separable(pred, &win)?;
    let mu_y = tape.conv2d_separable(gt, &win)?;
    let x2 = tape.square(pred)?;
    let y2 = tape.square(gt)?;
    let xy = tape.mul(pred, gt)?;
    let e_xx = tape.conv2d_separable(x2, &win)?;
    let e_yy = tape.conv2d_separable(y2, &win)?;
    let e_xy = tape.conv2d_separable(xy, &win)?;

    let mx2 = tape.square(mu_x)?;
    let my2 = tape.square(mu_y)?;
    let mxy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mx2)?;
    let var_y = tape.sub(e_yy, my2)?;
    let cov = tape.sub(e_xy, mxy)?;

    let lum_num = tape.scale(mxy, two)?;
    let lum_num = tape.add_scalar(lum_num, c1)?;
    let cs_num = tape.scale(cov, two)?;
    let cs_num = tape.add_scalar(cs_num, c2)?;
    let lum_den = tape.add(mx2, my2)?;
    let lum_den = tape.add_scalar(lum_den, c1)?;
    let cs_den = tape.add(var_x, var_y)?;
    let cs_den = tape.add_scalar(cs_den, c2)?;

    let num = tape.mul(lum_num, cs_num)?;
    let den = tape.mul(lum_den, cs_den)?;
    tape.div(num, den)
}

pub fn ssim_loss_on_tape<T: Real>(tape: &mut Tape<T>, pred: NodeId, gt: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let map = ssim_map_on_tape(tape, pred, gt, cfg)?;
    let mean = tape.mean(map)?;
    let neg = tape.scale(mean, -T::one())?;
    tape.add_scalar(neg, T::one())
}

pub fn combined_loss_on_tape<T: Real>(tape: &mut Tape<T>, pred: NodeId, gt: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    if cfg.lambda >= 1.0 {
        return ssim_loss_on_tape(tape, pred, gt, cfg);
    }
    if cfg.lambda <= 0.0 {
        return mse_loss_on_tape(tape, pred, gt);
    }
    let s = ssim_loss_on_tape(tape, pred, gt, cfg)?;
    let m = mse_loss_on_tape(tape, pred, gt)?;
    tape.lerp_pair(s, T::lit(cfg.lambda), m, T::lit(1.0 - cfg.lambda))
}
