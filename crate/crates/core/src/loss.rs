//! Training objectives and their gradients.
//!
//! Scores are discriminator probabilities. Logarithms are clamped at [`LOG_CLAMP`] so losses stay
//! finite when the discriminator saturates; below the clamp the gradient is zero.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOG_CLAMP: f64 = 1e-12;

/// How the masked L2 term is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L2Reduction {
    /// Weighted mean over patch pixels, averaged over the batch.
    #[default]
    Mean,
    /// Weighted sum over patch pixels, averaged over the batch.
    Sum,
}

/// Margin-weighted mask over the reconstructed patch.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec<S> {
    patch_size: usize,
    margin_width: usize,
    margin_weight: S,
    reduction: L2Reduction,
    weights: Tensor<S>,
}

impl<S: Scalar> MaskSpec<S> {
    pub fn new(patch_size: usize, margin_width: usize, margin_weight: f64, reduction: L2Reduction) -> Result<Self> {
        if patch_size == 0 || 2 * margin_width > patch_size {
            return Err(contract(format!("margin {margin_width} does not fit a {patch_size}-pixel patch")));
        }
        if !(margin_weight >= 0.0) {
            return Err(contract("margin weight must be non-negative"));
        }
        let w = S::from_f64_lossy(margin_weight);
        let weights = Tensor::from_fn(&[patch_size, patch_size], |i| {
            let (y, x) = (i / patch_size, i % patch_size);
            let edge = y.min(x).min(patch_size - 1 - y).min(patch_size - 1 - x);
            if edge < margin_width {
                w
            } else {
                S::one()
            }
        });
        Ok(Self { patch_size, margin_width, margin_weight: w, reduction, weights })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn margin_width(&self) -> usize {
        self.margin_width
    }

    pub fn margin_weight(&self) -> S {
        self.margin_weight
    }

    /// Per-pixel weight map, `patch_size x patch_size`.
    pub fn weight_map(&self) -> &Tensor<S> {
        &self.weights
    }

    fn check(&self, real: &Tensor<S>, fake: &Tensor<S>) -> Result<usize> {
        if real.shape() != fake.shape() {
            return Err(Error::ShapeMismatch { left: real.shape().to_vec(), right: fake.shape().to_vec() });
        }
        let (n, c, h, w) = real.dims4()?;
        if (c, h, w) != (1, self.patch_size, self.patch_size) {
            return Err(contract(format!(
                "expected N x 1 x {p} x {p} patches, got {:?}",
                real.shape(),
                p = self.patch_size
            )));
        }
        if n == 0 {
            return Err(contract("empty batch"));
        }
        Ok(n)
    }

    /// Divisor applied to the per-batch weighted sum.
    fn divisor(&self, n: usize) -> S {
        let per_sample = match self.reduction {
            L2Reduction::Mean => self.patch_size * self.patch_size,
            L2Reduction::Sum => 1,
        };
        S::from_usize(n * per_sample).unwrap()
    }
}

/// Margin-weighted squared error between real and reconstructed patches.
pub fn weighted_l2<S: Scalar>(real: &Tensor<S>, fake: &Tensor<S>, mask: &MaskSpec<S>) -> Result<S> {
    let n = mask.check(real, fake)?;
    let w = mask.weights.data();
    let total: S = real
        .data()
        .chunks(w.len())
        .zip(fake.data().chunks(w.len()))
        .flat_map(|(r, f)| r.iter().zip(f).zip(w).map(|((&a, &b), &k)| k * (a - b) * (a - b)))
        .sum();
    Ok(total / mask.divisor(n))
}

/// Gradient of [`weighted_l2`] with respect to the reconstructed patch.
pub fn weighted_l2_grad<S: Scalar>(real: &Tensor<S>, fake: &Tensor<S>, mask: &MaskSpec<S>) -> Result<Tensor<S>> {
    let n = mask.check(real, fake)?;
    let w = mask.weights.data();
    let scale = S::from_f64_lossy(2.0) / mask.divisor(n);
    let data =
        real.data().iter().zip(fake.data()).zip(w.iter().cycle()).map(|((&a, &b), &k)| scale * k * (b - a)).collect();
    Tensor::new(real.shape(), data)
}

fn check_scores<S: Scalar>(scores: &Tensor<S>) -> Result<()> {
    if scores.is_empty() {
        return Err(contract("empty score batch"));
    }
    if let Some(bad) = scores.data().iter().find(|&&s| !(s >= S::zero() && s <= S::one())) {
        return Err(contract(format!("score {bad} outside [0, 1]")));
    }
    Ok(())
}

fn check_pair<S: Scalar>(real: &Tensor<S>, fake: &Tensor<S>) -> Result<()> {
    check_scores(real)?;
    check_scores(fake)?;
    if real.len() != fake.len() {
        return Err(Error::ShapeMismatch { left: real.shape().to_vec(), right: fake.shape().to_vec() });
    }
    Ok(())
}

fn clamped_ln<S: Scalar>(v: S) -> S {
    v.max(S::from_f64_lossy(LOG_CLAMP)).ln()
}

/// d/dv of `ln(max(v, clamp))`.
fn clamped_ln_grad<S: Scalar>(v: S) -> S {
    if v >= S::from_f64_lossy(LOG_CLAMP) {
        S::one() / v
    } else {
        S::zero()
    }
}

fn count<S: Scalar>(t: &Tensor<S>) -> S {
    S::from_usize(t.len()).unwrap()
}

/// Generator adversarial loss: mean of `-ln(score)` over reconstructed patches.
pub fn adv_loss_generator<S: Scalar>(fake_scores: &Tensor<S>) -> Result<S> {
    check_scores(fake_scores)?;
    Ok(-fake_scores.data().iter().map(|&s| clamped_ln(s)).sum::<S>() / count(fake_scores))
}

pub fn adv_loss_generator_grad<S: Scalar>(fake_scores: &Tensor<S>) -> Result<Tensor<S>> {
    check_scores(fake_scores)?;
    let n = count(fake_scores);
    Ok(fake_scores.map(|s| -clamped_ln_grad(s) / n))
}

/// Discriminator binary cross-entropy, real and reconstructed halves weighted equally.
pub fn adv_loss_discriminator<S: Scalar>(real_scores: &Tensor<S>, fake_scores: &Tensor<S>) -> Result<S> {
    check_pair(real_scores, fake_scores)?;
    let total: S = real_scores
        .data()
        .iter()
        .zip(fake_scores.data())
        .map(|(&r, &f)| clamped_ln(r) + clamped_ln(S::one() - f))
        .sum();
    Ok(-total / (S::from_f64_lossy(2.0) * count(real_scores)))
}

/// Gradients of [`adv_loss_discriminator`] with respect to the real and fake scores.
pub fn adv_loss_discriminator_grad<S: Scalar>(
    real_scores: &Tensor<S>,
    fake_scores: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    check_pair(real_scores, fake_scores)?;
    let denom = S::from_f64_lossy(2.0) * count(real_scores);
    let gr = real_scores.map(|r| -clamped_ln_grad(r) / denom);
    let gf = fake_scores.map(|f| clamped_ln_grad(S::one() - f) / denom);
    Ok((gr, gf))
}

/// Weights of the generator's joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l2: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_l2: 0.998, lambda_adv: 0.002 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l2 >= 0.0 && self.lambda_adv >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn joint_loss<S: Scalar>(l2: S, adv: S, w: &LossWeights) -> S {
    S::from_f64_lossy(w.lambda_l2) * l2 + S::from_f64_lossy(w.lambda_adv) * adv
}

/// Gradient of the joint loss given the component gradients on the same tensor.
pub fn joint_loss_grad<S: Scalar>(grad_l2: &Tensor<S>, grad_adv: &Tensor<S>, w: &LossWeights) -> Result<Tensor<S>> {
    let (a, b) = (S::from_f64_lossy(w.lambda_l2), S::from_f64_lossy(w.lambda_adv));
    grad_l2.zip_map(grad_adv, |x, y| a * x + b * y)
}

/// Batch mean of `ln D(real) + ln(1 - D(fake))`; `-ln 4` at the 0.5/0.5 equilibrium.
pub fn minimax_value<S: Scalar>(real_scores: &Tensor<S>, fake_scores: &Tensor<S>) -> Result<S> {
    check_pair(real_scores, fake_scores)?;
    let total: S = real_scores
        .data()
        .iter()
        .zip(fake_scores.data())
        .map(|(&r, &f)| clamped_ln(r) + clamped_ln(S::one() - f))
        .sum();
    Ok(total / count(real_scores))
}
