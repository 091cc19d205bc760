//! Central finite differences for checking hand-written backward passes.
//!
//! Besides the generic helpers, each `check_*` function builds a random instance of one layer,
//! loss or network from a seed, differentiates the scalar `sum(r * output)` for a random `r`
//! both analytically and numerically, and returns the largest relative error.

use crate::error::Result;
use crate::layers::{
    conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, Activation, BatchNorm, ConvParams, Mode,
};
use crate::loss::{
    adv_loss_discriminator, adv_loss_discriminator_grad, adv_loss_generator, adv_loss_generator_grad, joint_loss,
    joint_loss_grad, weighted_l2, weighted_l2_grad, L2Reduction, LossWeights, MaskSpec,
};
use crate::models::{build_discriminator, build_generator, ModelConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Step used for parameter value `theta`.
pub fn step(theta: f64) -> f64 {
    1e-5 * (1.0 + theta.abs())
}

/// `|analytic - numeric|` scaled by the larger magnitude, with a floor of 1e-6 so that
/// near-zero gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Numerical gradient of `loss` with respect to every entry of `values`, which is perturbed in
/// place and restored.
pub fn numeric_gradient(values: &mut [f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let orig = values[i];
            let h = step(orig);
            values[i] = orig + h;
            let up = loss(values);
            values[i] = orig - h;
            let down = loss(values);
            values[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between two gradients of equal length.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic.iter().zip(numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max)
}

/// Absolute error below which a whole-network comparison cannot distinguish gradients from
/// roundoff: the loss's own rounding noise divided by the step, with generous headroom.
fn network_floor(abs_loss: f64) -> f64 {
    (1e4 * f64::EPSILON * abs_loss / step(0.0)).max(1e-6)
}

fn floored_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

fn abs_weighted_sum(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| (a * b).abs()).sum()
}

fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.normal(0.0, std).expect("positive std")).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).expect("length matches shape")
}

fn weighted_sum(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Numerical gradient of `loss` with respect to one tensor, perturbing a copy.
fn tensor_gradient(t: &Tensor<f64>, mut loss: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut values = t.data().to_vec();
    numeric_gradient(&mut values, |v| loss(&Tensor::new(t.shape(), v.to_vec()).expect("same shape")))
}

fn conv_case(seed: u64, deconv: bool) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let stride = 1 + rng.index(2)?;
    let padding = rng.index(2)?;
    let (input, weights) = if deconv {
        (normal(&[2, 3, 3, 3], 1.0, &mut rng), normal(&[3, 2, 4, 4], 0.5, &mut rng))
    } else {
        (normal(&[2, 3, 6, 6], 1.0, &mut rng), normal(&[4, 3, 3, 3], 0.5, &mut rng))
    };
    let bias_len = if deconv { 2 } else { 4 };
    let bias = normal(&[bias_len], 0.5, &mut rng);
    let forward = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> Tensor<f64> {
        let p = ConvParams::new(w.clone(), b.clone(), stride, padding).expect("valid params");
        if deconv { deconv2d_forward(x, &p) } else { conv2d_forward(x, &p) }.expect("valid forward")
    };
    let out = forward(&input, &weights, &bias);
    let r = normal(out.shape(), 1.0, &mut rng);
    let p = ConvParams::new(weights.clone(), bias.clone(), stride, padding)?;
    let g = if deconv { deconv2d_backward(&input, &p, &r)? } else { conv2d_backward(&input, &p, &r)? };
    let ni = tensor_gradient(&input, |x| weighted_sum(&forward(x, &weights, &bias), &r));
    let nw = tensor_gradient(&weights, |w| weighted_sum(&forward(&input, w, &bias), &r));
    let nb = tensor_gradient(&bias, |b| weighted_sum(&forward(&input, &weights, b), &r));
    Ok(max_relative_error(g.grad_input.data(), &ni)
        .max(max_relative_error(g.grad_weights.data(), &nw))
        .max(max_relative_error(g.grad_bias.data(), &nb)))
}

/// Input, weight and bias gradients of a random strided/padded convolution.
pub fn check_conv2d(seed: u64) -> Result<f64> {
    conv_case(seed, false)
}

/// Input, weight and bias gradients of a random transposed convolution.
pub fn check_deconv2d(seed: u64) -> Result<f64> {
    conv_case(seed, true)
}

/// Input, scale and shift gradients of training-mode batch normalization.
pub fn check_batchnorm(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let input = normal(&[3, 2, 3, 3], 2.0, &mut rng).add_scalar(0.5);
    let mut bn = BatchNorm::<f64>::new(2, 1e-5, 0.1)?;
    bn.gamma = normal(&[2], 1.0, &mut rng);
    bn.beta = normal(&[2], 1.0, &mut rng);
    let (out, cache, _) = bn.forward(&input, Mode::Train)?;
    let r = normal(out.shape(), 1.0, &mut rng);
    let g = bn.backward(&cache, &r)?;
    let run = |bn: &BatchNorm<f64>, x: &Tensor<f64>| weighted_sum(&bn.forward(x, Mode::Train).expect("valid").0, &r);
    let ni = tensor_gradient(&input, |x| run(&bn, x));
    let ng = tensor_gradient(&bn.gamma, |t| run(&BatchNorm { gamma: t.clone(), ..bn.clone() }, &input));
    let nb = tensor_gradient(&bn.beta, |t| run(&BatchNorm { beta: t.clone(), ..bn.clone() }, &input));
    Ok(max_relative_error(g.grad_input.data(), &ni)
        .max(max_relative_error(g.grad_gamma.data(), &ng))
        .max(max_relative_error(g.grad_beta.data(), &nb)))
}

/// Gradient of an activation at points at least 1e-3 away from zero.
pub fn check_activation(act: Activation, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let x = normal(&[2, 3, 4, 4], 2.0, &mut rng).map(|v| if v.abs() < 1e-3 { v.signum() * 1e-3 + v } else { v });
    let out = act.forward(&x);
    let r = normal(out.shape(), 1.0, &mut rng);
    let g = act.backward(&x, &out, &r)?;
    let n = tensor_gradient(&x, |x| weighted_sum(&act.forward(x), &r));
    Ok(max_relative_error(g.data(), &n))
}

/// Every loss gradient: masked L2 (both reductions), both adversarial losses and the joint loss.
pub fn check_losses(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let real = uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
    let fake = uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
    let mut worst: f64 = 0.0;
    for reduction in [L2Reduction::Mean, L2Reduction::Sum] {
        let mask = MaskSpec::<f64>::new(8, 2, 10.0, reduction)?;
        let g = weighted_l2_grad(&real, &fake, &mask)?;
        let n = tensor_gradient(&fake, |f| weighted_l2(&real, f, &mask).expect("valid"));
        worst = worst.max(max_relative_error(g.data(), &n));
    }

    let sr = uniform(&[6], 0.05, 0.95, &mut rng);
    let sf = uniform(&[6], 0.05, 0.95, &mut rng);
    let g = adv_loss_generator_grad(&sf)?;
    worst = worst.max(max_relative_error(g.data(), &tensor_gradient(&sf, |s| adv_loss_generator(s).expect("valid"))));
    let (gr, gf) = adv_loss_discriminator_grad(&sr, &sf)?;
    let nr = tensor_gradient(&sr, |s| adv_loss_discriminator(s, &sf).expect("valid"));
    let nf = tensor_gradient(&sf, |s| adv_loss_discriminator(&sr, s).expect("valid"));
    worst = worst.max(max_relative_error(gr.data(), &nr)).max(max_relative_error(gf.data(), &nf));

    // joint loss over a patch whose pixels double as discriminator scores
    let w = LossWeights::default();
    let mask = MaskSpec::<f64>::new(8, 2, 10.0, L2Reduction::Mean)?;
    let probs = uniform(&[1, 1, 8, 8], 0.05, 0.95, &mut rng);
    let target = uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
    let joint = |p: &Tensor<f64>| {
        let l2 = weighted_l2(&target, p, &mask).expect("valid");
        let adv = adv_loss_generator(&p.reshape(&[64]).expect("64 values")).expect("valid");
        joint_loss(l2, adv, &w)
    };
    let g_adv = adv_loss_generator_grad(&probs.reshape(&[64])?)?.reshape(&[1, 1, 8, 8])?;
    let g = joint_loss_grad(&weighted_l2_grad(&target, &probs, &mask)?, &g_adv, &w)?;
    worst = worst.max(max_relative_error(g.data(), &tensor_gradient(&probs, joint)));
    Ok(worst)
}

/// Gradient of `sum(r * generate(x))` with respect to every generator weight, on a 16-pixel
/// configuration in training mode. Entries smaller than the loss's rounding noise (such as
/// the exactly-zero gradients of biases feeding batch normalization) are compared absolutely.
pub fn check_generator(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut cfg = ModelConfig::with_sizes(16, 2, 2);
    cfg.init_std = 0.3;
    let mut g = build_generator::<f64>(&cfg, &mut rng)?;
    let x = normal(&[4, 1, 16, 16], 1.0, &mut rng);
    let pass = g.forward(&x, Mode::Train)?;
    let r = normal(pass.output().shape(), 1.0, &mut rng);
    let floor = network_floor(abs_weighted_sum(pass.output(), &r));
    let analytic = g.backward(&pass, &r)?;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut values = g.params_mut()[i].data().to_vec();
        let n = numeric_gradient(&mut values, |v| {
            g.params_mut()[i].data_mut().copy_from_slice(v);
            weighted_sum(&g.generate(&x, Mode::Train).expect("valid"), &r)
        });
        g.params_mut()[i].data_mut().copy_from_slice(&values);
        worst = worst.max(floored_error(a.data(), &n, floor));
    }
    Ok(worst)
}

/// Gradient of `sum(r * scores)` with respect to every discriminator weight and its input.
pub fn check_discriminator(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut cfg = ModelConfig::with_sizes(16, 2, 2);
    cfg.init_std = 0.3;
    let mut d = build_discriminator::<f64>(&cfg, &mut rng)?;
    let x = normal(&[3, 1, 8, 8], 1.0, &mut rng);
    let pass = d.forward(&x, Mode::Train)?;
    let r = normal(&[3], 1.0, &mut rng);
    let floor = network_floor(abs_weighted_sum(&d.score(&x, Mode::Train)?, &r));
    let (grad_input, analytic) = d.backward(&pass, &r)?;
    let mut worst = floored_error(
        grad_input.data(),
        &tensor_gradient(&x, |x| weighted_sum(&d.score(x, Mode::Train).expect("valid"), &r)),
        floor,
    );
    for (i, a) in analytic.iter().enumerate() {
        let mut values = d.params_mut()[i].data().to_vec();
        let n = numeric_gradient(&mut values, |v| {
            d.params_mut()[i].data_mut().copy_from_slice(v);
            weighted_sum(&d.score(&x, Mode::Train).expect("valid"), &r)
        });
        d.params_mut()[i].data_mut().copy_from_slice(&values);
        worst = worst.max(floored_error(a.data(), &n, floor));
    }
    Ok(worst)
}
