//! Adversarial and reconstruction losses, in minimisation form.

use crate::error::{invalid, Error, Result};
use crate::nn::{Real, Tensor4};

const SCORE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the L1 reconstruction term.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 100.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorLoss {
    pub total: f64,
    pub gan: f64,
    pub l1: f64,
}

fn check_scores<T: Real>(scores: &Tensor4<T>) -> Result<()> {
    if scores.is_empty() {
        return Err(invalid("empty score map"));
    }
    match scores.data().iter().find(|s| !(s.as_f64() >= 0.0 && s.as_f64() <= 1.0)) {
        Some(s) => Err(Error::NumericDomain(format!("discriminator score {s:?} outside (0, 1)"))),
        None => Ok(()),
    }
}

#[inline]
fn clamp(s: f64) -> f64 {
    s.clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR)
}

/// `−mean log D(real) − mean log(1 − D(fake))`.
pub fn loss_d<T: Real>(scores_real: &Tensor4<T>, scores_fake: &Tensor4<T>) -> Result<f64> {
    check_scores(scores_real)?;
    check_scores(scores_fake)?;
    let real = scores_real.data().iter().map(|s| -clamp(s.as_f64()).ln()).sum::<f64>() / scores_real.len() as f64;
    let fake =
        scores_fake.data().iter().map(|s| -(1.0 - clamp(s.as_f64())).ln()).sum::<f64>() / scores_fake.len() as f64;
    Ok(real + fake)
}

/// Gradients of [`loss_d`] w.r.t. the real and fake scores.
pub fn loss_d_backward<T: Real>(scores_real: &Tensor4<T>, scores_fake: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    let nr = scores_real.len() as f64;
    let nf = scores_fake.len() as f64;
    (
        scores_real.map(|s| T::lit(-1.0 / (nr * clamp(s.as_f64())))),
        scores_fake.map(|s| T::lit(1.0 / (nf * (1.0 - clamp(s.as_f64()))))),
    )
}

/// `−mean log D(fake) + λ · mean |target − generated|`.
pub fn loss_g<T: Real>(
    scores_fake: &Tensor4<T>,
    target: &Tensor4<T>,
    generated: &Tensor4<T>,
    weights: LossWeights,
) -> Result<GeneratorLoss> {
    if target.shape() != generated.shape() {
        return Err(invalid(format!(
            "target {:?} and generated {:?} differ in shape",
            target.shape(),
            generated.shape()
        )));
    }
    check_scores(scores_fake)?;
    let gan = scores_fake.data().iter().map(|s| -clamp(s.as_f64()).ln()).sum::<f64>() / scores_fake.len() as f64;
    let l1 = target
        .data()
        .iter()
        .zip(generated.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum::<f64>()
        / target.len() as f64;
    Ok(GeneratorLoss { total: gan + weights.lambda * l1, gan, l1 })
}

/// Gradients of [`loss_g`] w.r.t. the fake scores and the generated image.
pub fn loss_g_backward<T: Real>(
    scores_fake: &Tensor4<T>,
    target: &Tensor4<T>,
    generated: &Tensor4<T>,
    weights: LossWeights,
) -> (Tensor4<T>, Tensor4<T>) {
    let nf = scores_fake.len() as f64;
    let scale = weights.lambda / target.len() as f64;
    let mut dgen = generated.clone();
    for (d, t) in dgen.data_mut().iter_mut().zip(target.data()) {
        let diff = d.as_f64() - t.as_f64();
        *d = T::lit(if diff > 0.0 { scale } else if diff < 0.0 { -scale } else { 0.0 });
    }
    (scores_fake.map(|s| T::lit(-1.0 / (nf * clamp(s.as_f64())))), dgen)
}
