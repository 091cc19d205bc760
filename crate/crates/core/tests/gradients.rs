use cxinpaint_core::gradcheck::{
    check_activation, check_batchnorm, check_conv2d, check_deconv2d, check_discriminator, check_generator, check_losses,
};
use cxinpaint_core::layers::Activation;

const SEEDS: u64 = 20;

fn worst(check: impl Fn(u64) -> cxinpaint_core::Result<f64>) -> f64 {
    (0..SEEDS).map(|s| check(s).unwrap()).fold(0.0, f64::max)
}

#[test]
fn conv2d_matches_finite_differences() {
    let e = worst(check_conv2d);
    assert!(e < 1e-4, "max relative error {e}");
}

#[test]
fn deconv2d_matches_finite_differences() {
    let e = worst(check_deconv2d);
    assert!(e < 1e-4, "max relative error {e}");
}

#[test]
fn batchnorm_matches_finite_differences() {
    let e = worst(check_batchnorm);
    assert!(e < 1e-4, "max relative error {e}");
}

#[test]
fn activations_match_finite_differences() {
    for act in [Activation::LeakyRelu { slope: 0.2 }, Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
        let e = worst(|s| check_activation(act, s));
        assert!(e < 1e-4, "{act:?}: max relative error {e}");
    }
}

#[test]
fn losses_match_finite_differences() {
    let e = worst(check_losses);
    assert!(e < 1e-5, "max relative error {e}");
}

#[test]
fn generator_matches_finite_differences() {
    let e = worst(check_generator);
    assert!(e < 1e-3, "max relative error {e}");
}

#[test]
fn discriminator_matches_finite_differences() {
    let e = worst(check_discriminator);
    assert!(e < 1e-3, "max relative error {e}");
}
