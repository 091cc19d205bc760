//! Element-wise nonlinearities. At a kink (`x == 0`) the slope is taken from the positive side.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn forward<S: Scalar>(&self, x: &Tensor<S>) -> Tensor<S> {
        match *self {
            Activation::LeakyRelu { slope } => {
                let a = S::from_f64_lossy(slope);
                x.map(|v| if v >= S::zero() { v } else { a * v })
            }
            Activation::Relu => x.map(|v| v.max(S::zero())),
            Activation::Tanh => x.map(S::tanh),
            Activation::Sigmoid => x.map(sigmoid),
        }
    }

    /// Gradient with respect to the input, given the forward input and output.
    pub fn backward<S: Scalar>(
        &self,
        input: &Tensor<S>,
        output: &Tensor<S>,
        grad_output: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        if input.shape() != grad_output.shape() || output.shape() != grad_output.shape() {
            return Err(Error::ShapeMismatch { left: input.shape().to_vec(), right: grad_output.shape().to_vec() });
        }
        let one = S::one();
        let data = match *self {
            Activation::LeakyRelu { slope } => {
                let a = S::from_f64_lossy(slope);
                input
                    .data()
                    .iter()
                    .zip(grad_output.data())
                    .map(|(&x, &g)| if x >= S::zero() { g } else { a * g })
                    .collect()
            }
            Activation::Relu => input
                .data()
                .iter()
                .zip(grad_output.data())
                .map(|(&x, &g)| if x >= S::zero() { g } else { S::zero() })
                .collect(),
            Activation::Tanh => {
                output.data().iter().zip(grad_output.data()).map(|(&y, &g)| g * (one - y * y)).collect()
            }
            Activation::Sigmoid => {
                output.data().iter().zip(grad_output.data()).map(|(&y, &g)| g * y * (one - y)).collect()
            }
        };
        Tensor::new(input.shape(), data)
    }
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}
