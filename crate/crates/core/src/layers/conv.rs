//! Strided 2-d convolution and its transpose, forward and backward.
//!
//! Convolution is cross-correlation (no kernel flip). Each sample is lowered with im2col and
//! multiplied with one GEMM; weight gradients accumulate over the batch in sample order, so
//! results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernel, bias and geometry of a convolution or transposed convolution.
///
/// Weight layout is `a x b x kh x kw`. A convolution maps `b` channels to `a`; a transposed
/// convolution with the same tensor maps `a` channels to `b`, which makes the two adjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<S> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Gradients of one layer with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct LayerGrads<S> {
    pub grad_input: Tensor<S>,
    pub grad_weights: Tensor<S>,
    pub grad_bias: Tensor<S>,
}

/// Output side length of a forward convolution, if positive.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output side length of a transposed convolution, if positive.
pub fn deconv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if input == 0 || stride == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * padding).filter(|&s| s > 0)
}

impl<S: Scalar> ConvParams<S> {
    pub fn new(weights: Tensor<S>, bias: Tensor<S>, stride: usize, padding: usize) -> Result<Self> {
        if weights.shape().len() != 4 {
            return Err(contract(format!("conv weights must be 4-d, got {:?}", weights.shape())));
        }
        if stride == 0 {
            return Err(contract("conv stride must be positive"));
        }
        Ok(Self { weights, bias, stride, padding })
    }

    /// Weights drawn from normal(0, std), zero bias of length `bias_len`.
    pub fn random(shape: [usize; 4], bias_len: usize, geometry: ConvGeometry, std: f64, rng: &mut Rng) -> Result<Self> {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(S::from_f64_lossy(rng.normal(0.0, std)?));
        }
        Self::new(Tensor::new(&shape, data)?, Tensor::zeros(&[bias_len]), geometry.stride, geometry.padding)
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.weights.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Geometry of one im2col lowering: an image `channels x h x w` seen through `kh x kw`
/// windows producing `oh x ow` positions.
#[derive(Clone, Copy)]
struct Lowering {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn image_len(&self) -> usize {
        self.channels * self.h * self.w
    }

    /// Source pixel for window element `(ki, kj)` at output position `(oy, ox)`.
    #[inline]
    fn source(&self, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.padding)?;
        let x = (ox * self.stride + kj).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col<S: Scalar>(&self, image: &[S], cols: &mut [S]) {
        let l = self.positions();
        for c in 0..self.channels {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = match self.source(ki, kj, oy, ox) {
                                Some((y, x)) => plane[y * self.w + x],
                                None => S::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds columns back onto an image.
    fn col2im<S: Scalar>(&self, cols: &[S], image: &mut [S]) {
        let l = self.positions();
        for c in 0..self.channels {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, x)) = self.source(ki, kj, oy, ox) {
                                plane[y * self.w + x] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<S: Scalar>(out: &mut [S], bias: &[S], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums<S: Scalar>(grad: &Tensor<S>, channels: usize) -> Tensor<S> {
    let plane = grad.len() / grad.shape()[0] / channels;
    let mut out = vec![S::zero(); channels];
    for (i, chunk) in grad.data().chunks(plane).enumerate() {
        out[i % channels] += chunk.iter().copied().sum::<S>();
    }
    Tensor::new(&[channels], out).expect("bias gradient length")
}

fn conv_lowering<S: Scalar>(input: &Tensor<S>, p: &ConvParams<S>) -> Result<(usize, Lowering)> {
    let (n, c, h, w) = input.dims4()?;
    let (oc, ic, kh, kw) = p.dims();
    if c != ic {
        return Err(contract(format!("conv input has {c} channels, weights expect {ic}")));
    }
    if p.bias.len() != oc {
        return Err(contract(format!("conv bias has {} entries for {oc} output channels", p.bias.len())));
    }
    let oh = conv_out_size(h, kh, p.stride, p.padding);
    let ow = conv_out_size(w, kw, p.stride, p.padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => {
            Ok((n, Lowering { channels: c, h, w, kh, kw, stride: p.stride, padding: p.padding, oh, ow }))
        }
        _ => Err(contract(format!(
            "conv of {h}x{w} input with {kh}x{kw} kernel, stride {}, padding {} has no output",
            p.stride, p.padding
        ))),
    }
}

pub fn conv2d_forward<S: Scalar>(input: &Tensor<S>, p: &ConvParams<S>) -> Result<Tensor<S>> {
    let (n, low) = conv_lowering(input, p)?;
    let oc = p.weights.shape()[0];
    let (k, l) = (low.rows(), low.positions());
    let mut out = vec![S::zero(); n * oc * l];
    let mut cols = vec![S::zero(); k * l];
    for (x, y) in input.data().chunks(low.image_len()).zip(out.chunks_mut(oc * l)) {
        low.im2col(x, &mut cols);
        S::gemm(
            oc,
            k,
            l,
            S::one(),
            p.weights.data(),
            (k as isize, 1),
            &cols,
            (l as isize, 1),
            S::zero(),
            y,
            (l as isize, 1),
        );
        add_channel_bias(y, p.bias.data(), l);
    }
    Tensor::new(&[n, oc, low.oh, low.ow], out)
}

pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    p: &ConvParams<S>,
    grad_output: &Tensor<S>,
) -> Result<LayerGrads<S>> {
    let (n, low) = conv_lowering(input, p)?;
    let oc = p.weights.shape()[0];
    let expected = [n, oc, low.oh, low.ow];
    if grad_output.shape() != expected {
        return Err(Error::ShapeMismatch { left: grad_output.shape().to_vec(), right: expected.to_vec() });
    }
    let (k, l) = (low.rows(), low.positions());
    let mut grad_w = vec![S::zero(); oc * k];
    let mut grad_x = vec![S::zero(); input.len()];
    let mut cols = vec![S::zero(); k * l];
    let mut grad_cols = vec![S::zero(); k * l];
    let chunks = input
        .data()
        .chunks(low.image_len())
        .zip(grad_output.data().chunks(oc * l))
        .zip(grad_x.chunks_mut(low.image_len()));
    for ((x, gy), gx) in chunks {
        low.im2col(x, &mut cols);
        // dW += dY * cols^T
        S::gemm(
            oc,
            l,
            k,
            S::one(),
            gy,
            (l as isize, 1),
            &cols,
            (1, l as isize),
            S::one(),
            &mut grad_w,
            (k as isize, 1),
        );
        // dcols = W^T * dY
        S::gemm(
            k,
            oc,
            l,
            S::one(),
            p.weights.data(),
            (1, k as isize),
            gy,
            (l as isize, 1),
            S::zero(),
            &mut grad_cols,
            (l as isize, 1),
        );
        low.col2im(&grad_cols, gx);
    }
    Ok(LayerGrads {
        grad_input: Tensor::new(input.shape(), grad_x)?,
        grad_weights: Tensor::new(p.weights.shape(), grad_w)?,
        grad_bias: channel_sums(grad_output, oc),
    })
}

/// Lowering of the transposed convolution's output, plus the input channel count.
fn deconv_lowering<S: Scalar>(input: &Tensor<S>, p: &ConvParams<S>) -> Result<(usize, usize, Lowering)> {
    let (n, c, h, w) = input.dims4()?;
    let (ic, oc, kh, kw) = p.dims();
    if c != ic {
        return Err(contract(format!("deconv input has {c} channels, weights expect {ic}")));
    }
    if p.bias.len() != oc {
        return Err(contract(format!("deconv bias has {} entries for {oc} output channels", p.bias.len())));
    }
    let oh = deconv_out_size(h, kh, p.stride, p.padding);
    let ow = deconv_out_size(w, kw, p.stride, p.padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok((
            n,
            ic,
            // The output image is lowered to the input's spatial grid.
            Lowering { channels: oc, h: oh, w: ow, kh, kw, stride: p.stride, padding: p.padding, oh: h, ow: w },
        )),
        _ => Err(contract(format!(
            "deconv of {h}x{w} input with {kh}x{kw} kernel, stride {}, padding {} has no output",
            p.stride, p.padding
        ))),
    }
}

pub fn deconv2d_forward<S: Scalar>(input: &Tensor<S>, p: &ConvParams<S>) -> Result<Tensor<S>> {
    let (n, ic, low) = deconv_lowering(input, p)?;
    let (k, l) = (low.rows(), low.positions());
    let mut out = vec![S::zero(); n * low.image_len()];
    let mut cols = vec![S::zero(); k * l];
    for (x, y) in input.data().chunks(ic * l).zip(out.chunks_mut(low.image_len())) {
        // cols = W^T * x
        S::gemm(
            k,
            ic,
            l,
            S::one(),
            p.weights.data(),
            (1, k as isize),
            x,
            (l as isize, 1),
            S::zero(),
            &mut cols,
            (l as isize, 1),
        );
        low.col2im(&cols, y);
        add_channel_bias(y, p.bias.data(), low.h * low.w);
    }
    Tensor::new(&[n, low.channels, low.h, low.w], out)
}

pub fn deconv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    p: &ConvParams<S>,
    grad_output: &Tensor<S>,
) -> Result<LayerGrads<S>> {
    let (n, ic, low) = deconv_lowering(input, p)?;
    let expected = [n, low.channels, low.h, low.w];
    if grad_output.shape() != expected {
        return Err(Error::ShapeMismatch { left: grad_output.shape().to_vec(), right: expected.to_vec() });
    }
    let (k, l) = (low.rows(), low.positions());
    let mut grad_w = vec![S::zero(); ic * k];
    let mut grad_x = vec![S::zero(); input.len()];
    let mut grad_cols = vec![S::zero(); k * l];
    let chunks =
        input.data().chunks(ic * l).zip(grad_output.data().chunks(low.image_len())).zip(grad_x.chunks_mut(ic * l));
    for ((x, gy), gx) in chunks {
        low.im2col(gy, &mut grad_cols);
        // dx = W * gcols
        S::gemm(
            ic,
            k,
            l,
            S::one(),
            p.weights.data(),
            (k as isize, 1),
            &grad_cols,
            (l as isize, 1),
            S::zero(),
            gx,
            (l as isize, 1),
        );
        // dW += x * gcols^T
        S::gemm(
            ic,
            l,
            k,
            S::one(),
            x,
            (l as isize, 1),
            &grad_cols,
            (1, l as isize),
            S::one(),
            &mut grad_w,
            (k as isize, 1),
        );
    }
    Ok(LayerGrads {
        grad_input: Tensor::new(input.shape(), grad_x)?,
        grad_weights: Tensor::new(p.weights.shape(), grad_w)?,
        grad_bias: channel_sums(grad_output, low.channels),
    })
}
