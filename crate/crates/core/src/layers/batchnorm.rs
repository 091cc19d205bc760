//! Per-channel batch normalization over (batch, height, width).
//!
//! The forward pass is pure: in training mode it returns the batch statistics, and the caller
//! decides whether to fold them into the running averages with [`BatchNorm::commit`]. Frozen
//! networks simply skip the commit.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub epsilon: S,
    /// Weight of the new batch statistic in the running average.
    pub momentum: S,
}

/// Normalized output, the cache for `backward`, and batch statistics in training mode.
pub type BatchNormOutput<S> = (Tensor<S>, BatchNormCache<S>, Option<BatchStats<S>>);

/// Batch statistics observed in a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance, as folded into the running estimate.
    pub var_unbiased: Vec<S>,
}

/// Values the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<S> {
    mode: Mode,
    normalized: Tensor<S>,
    inv_std: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<S> {
    pub grad_input: Tensor<S>,
    pub grad_gamma: Tensor<S>,
    pub grad_beta: Tensor<S>,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize, epsilon: S, momentum: S) -> Result<Self> {
        if !(epsilon > S::zero()) {
            return Err(contract("batchnorm epsilon must be positive"));
        }
        if !(momentum > S::zero() && momentum < S::one()) {
            return Err(contract("batchnorm momentum must lie in (0, 1)"));
        }
        Ok(Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            epsilon,
            momentum,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, input: &Tensor<S>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.channels() {
            return Err(contract(format!("batchnorm has {} channels, input has {c}", self.channels())));
        }
        Ok((n, c, h * w))
    }

    pub fn forward(&self, input: &Tensor<S>, mode: Mode) -> Result<BatchNormOutput<S>> {
        let (n, c, plane) = self.check_input(input)?;
        let count = n * plane;
        let x = input.data();
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(contract(format!(
                        "training-mode batchnorm needs at least 2 values per channel, got {count}"
                    )));
                }
                let m = S::from_usize(count).unwrap();
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for ch in 0..c {
                    let values =
                        || (0..n).flat_map(move |b| x[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied());
                    let mu = values().sum::<S>() / m;
                    mean[ch] = mu;
                    var[ch] = values().map(|v| (v - mu) * (v - mu)).sum::<S>() / m;
                }
                let correction = m / (m - S::one());
                let var_unbiased = var.iter().map(|&v| v * correction).collect();
                (mean.clone(), var, Some(BatchStats { mean, var_unbiased }))
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_var.data().to_vec(), None),
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + self.epsilon).sqrt()).collect();
        let mut normalized = vec![S::zero(); input.len()];
        let mut out = vec![S::zero(); input.len()];
        for (i, (xs, (ns, ys))) in
            x.chunks(plane).zip(normalized.chunks_mut(plane).zip(out.chunks_mut(plane))).enumerate()
        {
            let ch = i % c;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], self.gamma.data()[ch], self.beta.data()[ch]);
            for ((&v, nv), yv) in xs.iter().zip(ns.iter_mut()).zip(ys.iter_mut()) {
                *nv = (v - mu) * is;
                *yv = g * *nv + b;
            }
        }
        let normalized = Tensor::new(input.shape(), normalized)?;
        Ok((Tensor::new(input.shape(), out)?, BatchNormCache { mode, normalized, inv_std }, stats))
    }

    /// Folds batch statistics into the running averages.
    pub fn commit(&mut self, stats: &BatchStats<S>) {
        let mom = self.momentum;
        let keep = S::one() - mom;
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + mom * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var_unbiased) {
            *r = keep * *r + mom * v;
        }
    }

    pub fn backward(&self, cache: &BatchNormCache<S>, grad_output: &Tensor<S>) -> Result<BatchNormGrads<S>> {
        if grad_output.shape() != cache.normalized.shape() {
            return Err(Error::ShapeMismatch {
                left: grad_output.shape().to_vec(),
                right: cache.normalized.shape().to_vec(),
            });
        }
        let (n, c, plane) = self.check_input(grad_output)?;
        let gy = grad_output.data();
        let xhat = cache.normalized.data();
        let mut grad_gamma = vec![S::zero(); c];
        let mut grad_beta = vec![S::zero(); c];
        for (i, (gs, ns)) in gy.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
            let ch = i % c;
            for (&g, &nv) in gs.iter().zip(ns) {
                grad_gamma[ch] += g * nv;
                grad_beta[ch] += g;
            }
        }
        let m = S::from_usize(n * plane).unwrap();
        let mut grad_x = vec![S::zero(); gy.len()];
        for (i, ((gs, ns), dx)) in gy.chunks(plane).zip(xhat.chunks(plane)).zip(grad_x.chunks_mut(plane)).enumerate() {
            let ch = i % c;
            let scale = self.gamma.data()[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Eval => {
                    for (d, &g) in dx.iter_mut().zip(gs) {
                        *d = scale * g;
                    }
                }
                Mode::Train => {
                    // dx = gamma * inv_std / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
                    let (sum_dy, sum_dy_xhat) = (grad_beta[ch], grad_gamma[ch]);
                    for ((d, &g), &nv) in dx.iter_mut().zip(gs).zip(ns) {
                        *d = scale / m * (m * g - sum_dy - nv * sum_dy_xhat);
                    }
                }
            }
        }
        Ok(BatchNormGrads {
            grad_input: Tensor::new(grad_output.shape(), grad_x)?,
            grad_gamma: Tensor::new(&[c], grad_gamma)?,
            grad_beta: Tensor::new(&[c], grad_beta)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn bn(c: usize) -> BatchNorm<f64> {
        BatchNorm::new(c, 1e-5, 0.1).unwrap()
    }

    #[test]
    fn standardized_input_passes_through() {
        // per channel values {-1, 1} have mean 0 and biased variance 1
        let x = Tensor::from_f64(&[2, 1, 1, 2], &[-1.0, 1.0, 1.0, -1.0]).unwrap();
        let (y, _, _) = bn(1).forward(&x, Mode::Train).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut layer = bn(2);
        layer.beta = Tensor::from_f64(&[2], &[5.0, 5.0]).unwrap();
        let x = Tensor::full(&[3, 2, 2, 2], 7.5);
        let (y, _, _) = layer.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn single_value_channel_rejected_in_training() {
        let x = Tensor::<f64>::zeros(&[1, 3, 1, 1]);
        assert!(matches!(bn(3).forward(&x, Mode::Train), Err(Error::Contract(_))));
        assert!(bn(3).forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn training_output_is_standardized() {
        let mut rng = Rng::new(4);
        let x = Tensor::from_fn(&[4, 3, 5, 5], |_| 3.0 + 2.0 * rng.normal(0.0, 1.0).unwrap());
        let (y, _, _) = bn(3).forward(&x, Mode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> =
                (0..4).flat_map(|b| y.data()[(b * 3 + ch) * 25..(b * 3 + ch + 1) * 25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn commit_updates_running_stats_only_when_asked() {
        let mut layer = bn(1);
        let x = Tensor::from_f64(&[1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let before = layer.clone();
        let (_, _, stats) = layer.forward(&x, Mode::Train).unwrap();
        assert_eq!(layer, before);
        layer.commit(&stats.unwrap());
        assert!((layer.running_mean.data()[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((layer.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut layer = bn(1);
        layer.running_mean = Tensor::from_f64(&[1], &[2.0]).unwrap();
        layer.running_var = Tensor::from_f64(&[1], &[4.0]).unwrap();
        let x = Tensor::from_f64(&[1, 1, 1, 1], &[4.0]).unwrap();
        let (y, _, stats) = layer.forward(&x, Mode::Eval).unwrap();
        assert!(stats.is_none());
        assert!((y.data()[0] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }
}
