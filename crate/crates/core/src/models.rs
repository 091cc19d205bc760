//! Generator (context encoder) and discriminator networks.
//!
//! Both are plain stacks of [`Stage`]s: a convolution or transposed convolution, optional batch
//! normalization, then an activation. For an `S x S` input image the encoder halves the side
//! with stride-2 convolutions down to `4 x 4`, then a full-field `4 x 4` convolution produces the
//! `1 x 1` bottleneck. The decoder mirrors it and emits the `S/2 x S/2` central patch.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, Activation, BatchNorm, BatchNormCache,
    BatchStats, ConvGeometry, ConvParams, Mode,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const DOWN: ConvGeometry = ConvGeometry { kernel: 4, stride: 2, padding: 1 };
const FULL: ConvGeometry = ConvGeometry { kernel: 4, stride: 1, padding: 0 };

/// How the encoder reaches its bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BottleneckKind {
    /// Stride-2 layers down to 4x4, then a 4x4 valid convolution to 1x1.
    #[default]
    FullField,
    /// Every encoder layer is stride 2, leaving a 2x2 bottleneck.
    Strided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub base_channels_g: usize,
    pub base_channels_d: usize,
    pub bottleneck_channels: usize,
    pub bottleneck: BottleneckKind,
    pub leaky_slope: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub init_std: f64,
    pub margin_width: usize,
    pub margin_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            patch_size: 64,
            base_channels_g: 128,
            base_channels_d: 64,
            bottleneck_channels: 4096,
            bottleneck: BottleneckKind::FullField,
            leaky_slope: 0.2,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
            init_std: 0.02,
            margin_width: 4,
            margin_weight: 10.0,
        }
    }
}

impl ModelConfig {
    /// Config for a given image side with consistent patch size and bottleneck width.
    pub fn with_sizes(image_size: usize, base_channels_g: usize, base_channels_d: usize) -> Self {
        let mut cfg =
            Self { image_size, patch_size: image_size / 2, base_channels_g, base_channels_d, ..Self::default() };
        cfg.bottleneck_channels = cfg.expected_bottleneck();
        cfg
    }

    /// Number of encoder convolutions.
    pub fn encoder_layers(&self) -> usize {
        self.image_size.trailing_zeros() as usize - 1
    }

    pub fn expected_bottleneck(&self) -> usize {
        self.base_channels_g << (self.encoder_layers() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return bad(format!("image_size must be a power of two >= 16, got {}", self.image_size));
        }
        if self.patch_size * 2 != self.image_size {
            return bad(format!("patch_size {} must be half of image_size {}", self.patch_size, self.image_size));
        }
        if self.base_channels_g == 0 || self.base_channels_d == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.bottleneck_channels != self.expected_bottleneck() {
            return bad(format!(
                "bottleneck_channels {} must equal base_channels_g * 2^(layers-1) = {}",
                self.bottleneck_channels,
                self.expected_bottleneck()
            ));
        }
        if !(self.bn_epsilon > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad("bn_epsilon must be positive and bn_momentum in (0, 1)".into());
        }
        if !(self.leaky_slope >= 0.0) || !(self.init_std >= 0.0) {
            return bad("leaky_slope and init_std must be non-negative".into());
        }
        if 2 * self.margin_width > self.patch_size || !(self.margin_weight >= 0.0) {
            return bad("margin must fit inside the patch and have a non-negative weight".into());
        }
        Ok(())
    }

    fn leaky(&self) -> Activation {
        Activation::LeakyRelu { slope: self.leaky_slope }
    }

    fn batchnorm<S: Scalar>(&self, channels: usize) -> Result<BatchNorm<S>> {
        BatchNorm::new(channels, S::from_f64_lossy(self.bn_epsilon), S::from_f64_lossy(self.bn_momentum))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Conv,
    Deconv,
}

/// One convolution (or transposed convolution), optional batch norm, and activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<S> {
    pub kind: StageKind,
    pub params: ConvParams<S>,
    pub bn: Option<BatchNorm<S>>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct StageCache<S> {
    input: Tensor<S>,
    bn: Option<BatchNormCache<S>>,
    pre_activation: Tensor<S>,
    output: Tensor<S>,
}

impl<S: Scalar> Stage<S> {
    fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<(StageCache<S>, Option<BatchStats<S>>)> {
        let z = match self.kind {
            StageKind::Conv => conv2d_forward(x, &self.params)?,
            StageKind::Deconv => deconv2d_forward(x, &self.params)?,
        };
        let (pre, bn_cache, stats) = match &self.bn {
            Some(bn) => {
                let (y, cache, stats) = bn.forward(&z, mode)?;
                (y, Some(cache), stats)
            }
            None => (z, None, None),
        };
        let output = self.activation.forward(&pre);
        Ok((StageCache { input: x.clone(), bn: bn_cache, pre_activation: pre, output }, stats))
    }

    /// Returns the input gradient and pushes parameter gradients in parameter order.
    fn backward(
        &self,
        cache: &StageCache<S>,
        grad_output: &Tensor<S>,
        grads: &mut Vec<Tensor<S>>,
    ) -> Result<Tensor<S>> {
        let g_pre = self.activation.backward(&cache.pre_activation, &cache.output, grad_output)?;
        let (g_z, bn_grads) = match (&self.bn, &cache.bn) {
            (Some(bn), Some(bc)) => {
                let g = bn.backward(bc, &g_pre)?;
                (g.grad_input, Some((g.grad_gamma, g.grad_beta)))
            }
            _ => (g_pre, None),
        };
        let lg = match self.kind {
            StageKind::Conv => conv2d_backward(&cache.input, &self.params, &g_z)?,
            StageKind::Deconv => deconv2d_backward(&cache.input, &self.params, &g_z)?,
        };
        grads.push(lg.grad_weights);
        grads.push(lg.grad_bias);
        if let Some((gg, gb)) = bn_grads {
            grads.push(gg);
            grads.push(gb);
        }
        Ok(lg.grad_input)
    }
}

/// Intermediate values of one forward pass through a stack of stages.
#[derive(Clone, Debug)]
pub struct Pass<S> {
    caches: Vec<StageCache<S>>,
    stats: Vec<Option<BatchStats<S>>>,
}

impl<S: Scalar> Pass<S> {
    pub fn output(&self) -> &Tensor<S> {
        &self.caches.last().expect("non-empty network").output
    }

    pub fn into_output(mut self) -> Tensor<S> {
        self.caches.pop().expect("non-empty network").output
    }
}

/// An ordered stack of stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<S> {
    pub stages: Vec<Stage<S>>,
}

impl<S: Scalar> Sequential<S> {
    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<Pass<S>> {
        let mut caches: Vec<StageCache<S>> = Vec::with_capacity(self.stages.len());
        let mut stats = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let input = caches.last().map_or(x, |c| &c.output);
            let (cache, st) = stage.forward(input, mode)?;
            caches.push(cache);
            stats.push(st);
        }
        Ok(Pass { caches, stats })
    }

    /// Folds a training pass's batch statistics into the running averages.
    pub fn commit(&mut self, pass: &Pass<S>) {
        for (stage, st) in self.stages.iter_mut().zip(&pass.stats) {
            if let (Some(bn), Some(st)) = (stage.bn.as_mut(), st) {
                bn.commit(st);
            }
        }
    }

    /// Gradient with respect to the input and to every parameter, in [`Self::params`] order.
    pub fn backward(&self, pass: &Pass<S>, grad_output: &Tensor<S>) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        let mut per_stage = Vec::with_capacity(self.stages.len());
        let mut g = grad_output.clone();
        for (stage, cache) in self.stages.iter().zip(&pass.caches).rev() {
            let mut grads = Vec::with_capacity(4);
            g = stage.backward(cache, &g, &mut grads)?;
            per_stage.push(grads);
        }
        per_stage.reverse();
        Ok((g, per_stage.into_iter().flatten().collect()))
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &s.params.weights));
            out.push((format!("{prefix}.{i}.bias"), &s.params.bias));
            if let Some(bn) = &s.bn {
                out.push((format!("{prefix}.{i}.bn.gamma"), &bn.gamma));
                out.push((format!("{prefix}.{i}.bn.beta"), &bn.beta));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.params.weights);
            out.push(&mut s.params.bias);
            if let Some(bn) = &mut s.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn named_buffers(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            if let Some(bn) = &s.bn {
                out.push((format!("{prefix}.{i}.bn.running_mean"), &bn.running_mean));
                out.push((format!("{prefix}.{i}.bn.running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            if let Some(bn) = &mut s.bn {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out
    }
}

fn stage<S: Scalar>(
    cfg: &ModelConfig,
    kind: StageKind,
    (c_in, c_out): (usize, usize),
    geometry: ConvGeometry,
    with_bn: bool,
    activation: Activation,
    rng: &mut Rng,
) -> Result<Stage<S>> {
    let k = geometry.kernel;
    // transposed convolutions store weights as in x out
    let shape = match kind {
        StageKind::Conv => [c_out, c_in, k, k],
        StageKind::Deconv => [c_in, c_out, k, k],
    };
    let params = ConvParams::random(shape, c_out, geometry, cfg.init_std, rng)?;
    let bn = if with_bn { Some(cfg.batchnorm(c_out)?) } else { None };
    Ok(Stage { kind, params, bn, activation })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<S> {
    pub config: ModelConfig,
    pub encoder: Sequential<S>,
    pub decoder: Sequential<S>,
}

#[derive(Clone, Debug)]
pub struct GeneratorPass<S> {
    pub encoder: Pass<S>,
    pub decoder: Pass<S>,
}

impl<S: Scalar> GeneratorPass<S> {
    pub fn output(&self) -> &Tensor<S> {
        self.decoder.output()
    }

    pub fn bottleneck(&self) -> &Tensor<S> {
        self.encoder.output()
    }
}

pub fn build_generator<S: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<Generator<S>> {
    cfg.validate()?;
    let n = cfg.encoder_layers();
    let base = cfg.base_channels_g;
    let last_geometry = match cfg.bottleneck {
        BottleneckKind::FullField => FULL,
        BottleneckKind::Strided => DOWN,
    };
    let mut encoder = Vec::with_capacity(n);
    let mut c_in = 1;
    for i in 0..n {
        let c_out = base << i;
        let geometry = if i + 1 == n { last_geometry } else { DOWN };
        encoder.push(stage(cfg, StageKind::Conv, (c_in, c_out), geometry, true, cfg.leaky(), rng)?);
        c_in = c_out;
    }
    let mut decoder = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let last = i + 2 == n;
        let c_out = if last { 1 } else { base << (n - 2 - i) };
        let geometry = if i == 0 { last_geometry } else { DOWN };
        let activation = if last { Activation::Tanh } else { Activation::Relu };
        decoder.push(stage(cfg, StageKind::Deconv, (c_in, c_out), geometry, !last, activation, rng)?);
        c_in = c_out;
    }
    Ok(Generator {
        config: cfg.clone(),
        encoder: Sequential { stages: encoder },
        decoder: Sequential { stages: decoder },
    })
}

impl<S: Scalar> Generator<S> {
    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.image_size;
        if (c, h, w) != (1, s, s) {
            return Err(contract(format!("generator expects N x 1 x {s} x {s} input, got {:?}", x.shape())));
        }
        Ok(())
    }

    pub fn forward(&self, masked: &Tensor<S>, mode: Mode) -> Result<GeneratorPass<S>> {
        self.check_input(masked)?;
        let encoder = self.encoder.forward(masked, mode)?;
        let decoder = self.decoder.forward(encoder.output(), mode)?;
        Ok(GeneratorPass { encoder, decoder })
    }

    /// Reconstructed central patch for a batch of masked images.
    pub fn generate(&self, masked: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        Ok(self.forward(masked, mode)?.decoder.into_output())
    }

    pub fn commit(&mut self, pass: &GeneratorPass<S>) {
        self.encoder.commit(&pass.encoder);
        self.decoder.commit(&pass.decoder);
    }

    /// Parameter gradients (encoder then decoder) for an upstream gradient on the patch.
    pub fn backward(&self, pass: &GeneratorPass<S>, grad_output: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let (g_bottleneck, mut dec) = self.decoder.backward(&pass.decoder, grad_output)?;
        let (_, mut grads) = self.encoder.backward(&pass.encoder, &g_bottleneck)?;
        grads.append(&mut dec);
        Ok(grads)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = self.encoder.named_params("enc");
        v.extend(self.decoder.named_params("dec"));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = self.encoder.named_buffers("enc");
        v.extend(self.decoder.named_buffers("dec"));
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = self.encoder.buffers_mut();
        v.extend(self.decoder.buffers_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<S> {
    pub config: ModelConfig,
    /// Strided stages followed by the 1x1 sigmoid head.
    pub net: Sequential<S>,
}

pub fn build_discriminator<S: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<Discriminator<S>> {
    if cfg.patch_size < 8 || !cfg.patch_size.is_power_of_two() {
        return Err(Error::Config(format!(
            "discriminator patch_size must be a power of two >= 8, got {}",
            cfg.patch_size
        )));
    }
    if cfg.base_channels_d == 0 {
        return Err(Error::Config("base_channels_d must be positive".into()));
    }
    let n = cfg.patch_size.trailing_zeros() as usize - 2;
    let mut stages = Vec::with_capacity(n + 1);
    let mut c_in = 1;
    for i in 0..n {
        let c_out = cfg.base_channels_d << i;
        stages.push(stage(cfg, StageKind::Conv, (c_in, c_out), DOWN, true, cfg.leaky(), rng)?);
        c_in = c_out;
    }
    stages.push(stage(cfg, StageKind::Conv, (c_in, 1), FULL, false, Activation::Sigmoid, rng)?);
    Ok(Discriminator { config: cfg.clone(), net: Sequential { stages } })
}

impl<S: Scalar> Discriminator<S> {
    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let p = self.config.patch_size;
        if (c, h, w) != (1, p, p) {
            return Err(contract(format!("discriminator expects N x 1 x {p} x {p} input, got {:?}", x.shape())));
        }
        Ok(())
    }

    /// Forward pass; the output holds one probability per sample (shape N x 1 x 1 x 1).
    pub fn forward(&self, patches: &Tensor<S>, mode: Mode) -> Result<Pass<S>> {
        self.check_input(patches)?;
        self.net.forward(patches, mode)
    }

    /// Probability that each patch is real, one per sample.
    pub fn score(&self, patches: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let out = self.forward(patches, mode)?.into_output();
        let n = out.shape()[0];
        out.reshape(&[n])
    }

    pub fn commit(&mut self, pass: &Pass<S>) {
        self.net.commit(pass);
    }

    /// Gradients for an upstream gradient on the per-sample scores (shape `[N]`).
    pub fn backward(&self, pass: &Pass<S>, grad_scores: &Tensor<S>) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        let g = grad_scores.reshape(pass.output().shape())?;
        self.net.backward(pass, &g)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        self.net.named_params("disc")
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.net.params_mut()
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor<S>)> {
        self.net.named_buffers("disc")
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.net.buffers_mut()
    }
}

/// Scores as a flat `[N]` tensor, taken from a discriminator pass.
pub fn pass_scores<S: Scalar>(pass: &Pass<S>) -> Tensor<S> {
    let out = pass.output();
    out.reshape(&[out.shape()[0]]).expect("scores reshape")
}

pub fn parameter_count<S: Scalar>(params: &[(String, &Tensor<S>)]) -> usize {
    params.iter().map(|(_, t)| t.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_sized_shapes() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.encoder_layers(), 6);
        assert_eq!(cfg.expected_bottleneck(), 4096);
        cfg.validate().unwrap();
        let g: Generator<f32> = build_generator(&cfg, &mut Rng::new(0)).unwrap();
        let enc: Vec<usize> = g.encoder.stages.iter().map(|s| s.params.weights.shape()[0]).collect();
        assert_eq!(enc, [128, 256, 512, 1024, 2048, 4096]);
        let dec: Vec<usize> = g.decoder.stages.iter().map(|s| s.params.weights.shape()[1]).collect();
        assert_eq!(dec, [2048, 1024, 512, 256, 1]);
        assert!(g.decoder.stages.last().unwrap().bn.is_none());
    }

    #[test]
    fn small_config_shapes() {
        let cfg = ModelConfig::with_sizes(32, 16, 8);
        assert_eq!(cfg.bottleneck_channels, 128);
        let g: Generator<f64> = build_generator(&cfg, &mut Rng::new(1)).unwrap();
        let x = Tensor::zeros(&[2, 1, 32, 32]);
        let pass = g.forward(&x, Mode::Train).unwrap();
        assert_eq!(pass.bottleneck().shape(), &[2, 128, 1, 1]);
        assert_eq!(pass.output().shape(), &[2, 1, 16, 16]);
    }

    #[test]
    fn strided_bottleneck_variant() {
        let mut cfg = ModelConfig::with_sizes(32, 4, 4);
        cfg.bottleneck = BottleneckKind::Strided;
        let g: Generator<f64> = build_generator(&cfg, &mut Rng::new(1)).unwrap();
        let pass = g.forward(&Tensor::zeros(&[2, 1, 32, 32]), Mode::Train).unwrap();
        assert_eq!(pass.bottleneck().shape(), &[2, 32, 2, 2]);
        assert_eq!(pass.output().shape(), &[2, 1, 16, 16]);
    }

    #[test]
    fn config_errors() {
        let mut cfg = ModelConfig::with_sizes(8, 4, 4);
        assert!(matches!(build_generator::<f32>(&cfg, &mut Rng::new(0)), Err(Error::Config(_))));
        cfg = ModelConfig::with_sizes(32, 4, 4);
        cfg.bottleneck_channels = 100;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg = ModelConfig::with_sizes(32, 4, 4);
        cfg.patch_size = 4;
        assert!(matches!(build_discriminator::<f32>(&cfg, &mut Rng::new(0)), Err(Error::Config(_))));
    }

    #[test]
    fn discriminator_scores_batch() {
        let cfg = ModelConfig::with_sizes(32, 4, 4);
        let d: Discriminator<f64> = build_discriminator(&cfg, &mut Rng::new(2)).unwrap();
        let mut rng = Rng::new(3);
        let x = Tensor::from_fn(&[8, 1, 16, 16], |_| rng.normal(0.0, 0.5).unwrap());
        let s = d.score(&x, Mode::Train).unwrap();
        assert_eq!(s.shape(), &[8]);
        assert!(s.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let cfg = ModelConfig::with_sizes(32, 4, 4);
        let g: Generator<f64> = build_generator(&cfg, &mut Rng::new(0)).unwrap();
        assert!(matches!(g.generate(&Tensor::zeros(&[1, 1, 16, 16]), Mode::Eval), Err(Error::Contract(_))));
    }

    #[test]
    fn commit_changes_only_buffers() {
        let cfg = ModelConfig::with_sizes(16, 4, 4);
        let mut g: Generator<f64> = build_generator(&cfg, &mut Rng::new(0)).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.normal(0.0, 1.0).unwrap());
        let before = g.clone();
        let pass = g.forward(&x, Mode::Train).unwrap();
        assert_eq!(g, before);
        g.commit(&pass);
        assert_ne!(g, before);
        let params_equal = g.named_params().iter().zip(before.named_params()).all(|((_, a), (_, b))| *a == b);
        assert!(params_equal);
    }
}
