//! Adversarial objectives with their gradients.

use super::{ModelError, Result};
use crate::neural::Tensor;

/// Lower clamp applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

// d/dp of ln(max(p, floor)); zero where the clamp is active.
fn clamped_ln_grad(p: f64) -> f64 {
    if p > LOG_FLOOR {
        1.0 / p
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLoss {
    /// `alpha * adv + beta * l1`.
    pub total: f64,
    /// `-mean(log d_fake)`.
    pub adv: f64,
    /// `mean |P - P̂|`.
    pub l1: f64,
    pub d_fake_grad: Tensor,
    pub fused_grad: Tensor,
}

/// `L_G = -alpha * mean(log D(fake)) + beta * mean|P - P̂|` and its gradients
/// with respect to the discriminator output and the generated image.
pub fn generator_loss(
    d_fake: &Tensor,
    fused: &Tensor,
    reference: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<GeneratorLoss> {
    if fused.dims() != reference.dims() {
        return Err(ModelError::DimensionMismatch(format!(
            "fused {:?} vs reference {:?}",
            fused.dims(),
            reference.dims()
        )));
    }
    let nd = d_fake.len() as f64;
    let np = fused.len() as f64;
    let adv = -d_fake.data().iter().map(|&p| clamped_ln(p)).sum::<f64>() / nd;
    let l1 = fused
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / np;
    let total = alpha * adv + beta * l1;
    if !total.is_finite() {
        return Err(ModelError::NonFiniteLoss { step: 0 });
    }
    let d_fake_grad = d_fake.map(|p| -alpha * clamped_ln_grad(p) / nd);
    let fused_grad = Tensor::new(
        fused.dims(),
        fused
            .data()
            .iter()
            .zip(reference.data())
            .map(|(f, r)| {
                let s = if f > r {
                    1.0
                } else if f < r {
                    -1.0
                } else {
                    0.0
                };
                beta * s / np
            })
            .collect(),
    )?;
    Ok(GeneratorLoss {
        total,
        adv,
        l1,
        d_fake_grad,
        fused_grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorLoss {
    pub total: f64,
    pub real_grad: Tensor,
    pub fake_grad: Tensor,
}

/// Binary cross-entropy `-mean(log D(real)) - mean(log(1 - D(fake)))`.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<DiscriminatorLoss> {
    let nr = d_real.len() as f64;
    let nf = d_fake.len() as f64;
    let real = -d_real.data().iter().map(|&p| clamped_ln(p)).sum::<f64>() / nr;
    let fake = -d_fake.data().iter().map(|&p| clamped_ln(1.0 - p)).sum::<f64>() / nf;
    let total = real + fake;
    if !total.is_finite() {
        return Err(ModelError::NonFiniteLoss { step: 0 });
    }
    Ok(DiscriminatorLoss {
        total,
        real_grad: d_real.map(|p| -clamped_ln_grad(p) / nr),
        fake_grad: d_fake.map(|p| clamped_ln_grad(1.0 - p) / nf),
    })
}

/// The discriminator objective exactly as printed, `mean(1 - log D(fake) +
/// log D(real))`. Minimizing it drives `D(real)` towards 0, so it is exposed
/// for inspection only and never used in training.
#[cfg(feature = "inspect-objectives")]
pub fn printed_discriminator_objective(d_real: &Tensor, d_fake: &Tensor) -> f64 {
    let n = d_real.len().min(d_fake.len());
    (0..n)
        .map(|i| 1.0 - clamped_ln(d_fake.data()[i]) + clamped_ln(d_real.data()[i]))
        .sum::<f64>()
        / n as f64
}
