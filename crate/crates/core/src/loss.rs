//! Training objectives: restoration L1, gradient and intensity consistency,
//! and their weighted total.
//!
//! The fused/dehazed predictions are tape variables; source images are data,
//! so the `max(...)` targets are constants and need no subgradient.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the restoration term in the total.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 1.0 }
    }
}

impl LossConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::Parameter(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(LossConfig { alpha })
    }
}

/// Per-channel Sobel magnitude `|Gx| + |Gy|` with replicate padding.
pub fn sobel_gradient<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let (gx, gy) = kernels::sobel(image.shape(), image.data());
    let mag = gx.iter().zip(&gy).map(|(a, b)| a.abs() + b.abs()).collect();
    Tensor::new(image.shape(), mag).expect("same shape")
}

fn check_rgb(name: &'static str, s: Shape) -> Result<()> {
    if s.c != 3 {
        return Err(Error::dim(name, 3, s.c));
    }
    Ok(())
}

fn check_sources(fused: Shape, ir: Shape, gt: Shape) -> Result<()> {
    check_rgb("fused channels", fused)?;
    check_rgb("ground-truth channels", gt)?;
    if ir.c != 1 {
        return Err(Error::dim("infrared channels", 1, ir.c));
    }
    fused.expect_spatial(&ir)?;
    fused.expect_spatial(&gt)
}

/// Elementwise `max(ir, gt_i)` with the single infrared channel broadcast.
fn channelwise_max<T: Real>(ir: &Tensor<T>, gt: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(gt.shape(), |c, y, x| ir.at(0, y, x).max(gt.at(c, y, x)))
}

/// Mean absolute error between the dehazed image and its ground truth.
pub fn l1_restoration<T: Real>(tape: &Tape<T>, dehazed: &Var<T>, gt: &Tensor<T>) -> Result<Var<T>> {
    dehazed.shape().expect_eq(&gt.shape())?;
    let d = tape.sub(dehazed, &tape.constant(gt.clone()))?;
    Ok(tape.mean(&tape.abs(&d)))
}

/// `(1/HW) sum_i || grad(F_i) - max(|grad IR|, |grad GT_i|) ||_1`.
pub fn gradient_loss<T: Real>(
    tape: &Tape<T>,
    fused: &Var<T>,
    ir: &Tensor<T>,
    gt: &Tensor<T>,
) -> Result<Var<T>> {
    check_sources(fused.shape(), ir.shape(), gt.shape())?;
    let target = channelwise_max(&sobel_gradient(ir), &sobel_gradient(gt));
    let gf = tape.sobel_magnitude(fused);
    let d = tape.sub(&gf, &tape.constant(target))?;
    let s = tape.sum(&tape.abs(&d));
    Ok(tape.scale(&s, T::one() / T::lit(fused.shape().plane() as f64)))
}

/// `(1/HW) sum_i || F_i - max(IR, GT_i) ||_1`.
pub fn intensity_loss<T: Real>(
    tape: &Tape<T>,
    fused: &Var<T>,
    ir: &Tensor<T>,
    gt: &Tensor<T>,
) -> Result<Var<T>> {
    check_sources(fused.shape(), ir.shape(), gt.shape())?;
    let target = channelwise_max(ir, gt);
    let d = tape.sub(fused, &tape.constant(target))?;
    let s = tape.sum(&tape.abs(&d));
    Ok(tape.scale(&s, T::one() / T::lit(fused.shape().plane() as f64)))
}

/// The individual terms and their weighted sum.
#[derive(Clone, Debug)]
pub struct LossTerms<T: Real = f32> {
    pub intensity: Var<T>,
    pub gradient: Var<T>,
    pub restoration: Var<T>,
    pub total: Var<T>,
}

impl<T: Real> LossTerms<T> {
    pub fn values(&self) -> [f64; 4] {
        [
            self.intensity.value().item().to_f64_lossy(),
            self.gradient.value().item().to_f64_lossy(),
            self.restoration.value().item().to_f64_lossy(),
            self.total.value().item().to_f64_lossy(),
        ]
    }
}

/// `l_int + l_grad + alpha * l_1`.
pub fn total_loss<T: Real>(
    tape: &Tape<T>,
    fused: &Var<T>,
    dehazed: &Var<T>,
    ir: &Tensor<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossTerms<T>> {
    let intensity = intensity_loss(tape, fused, ir, gt)?;
    let gradient = gradient_loss(tape, fused, ir, gt)?;
    let restoration = l1_restoration(tape, dehazed, gt)?;
    let total = tape.add(&intensity, &gradient)?;
    let total = tape.add(&total, &tape.scale(&restoration, T::lit(cfg.alpha)))?;
    Ok(LossTerms {
        intensity,
        gradient,
        restoration,
        total,
    })
}
