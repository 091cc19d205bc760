//! Adam, the alternating adversarial training loop, and balance diagnostics.
//!
//! Training runs in phases by epoch: generator-only on the masked L2 loss, then
//! discriminator-only, then both. Within the joint phase either network can additionally be
//! frozen on every k-th iteration. A frozen network is left bit-identical, including its batch
//! norm running statistics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::masked_batch;
use crate::error::{contract, Error, Result};
use crate::layers::Mode;
use crate::loss::{
    adv_loss_discriminator, adv_loss_discriminator_grad, adv_loss_generator, adv_loss_generator_grad, joint_loss_grad,
    minimax_value, weighted_l2, weighted_l2_grad, L2Reduction, LossWeights, MaskSpec,
};
use crate::models::{build_discriminator, build_generator, pass_scores, Discriminator, Generator, ModelConfig};
use crate::rng::{Rng, RngState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decay the learning rate linearly to zero over `total_epochs`.
    pub linear_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 0.0002, beta1: 0.5, beta2: 0.999, epsilon: 1e-8, linear_decay: false }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate >= 0.0) || !in_unit(self.beta1) || !in_unit(self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates for one network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let m: Vec<Tensor<S>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { config, v: m.clone(), m, t: 0 }
    }

    /// One Adam update at learning rate `lr`. Parameters and gradients are matched by position;
    /// `names` label them in errors.
    pub fn step(&mut self, params: Vec<&mut Tensor<S>>, grads: &[Tensor<S>], names: &[String], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(contract(format!(
                "Adam tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::ShapeMismatch { left: p.shape().to_vec(), right: g.shape().to_vec() });
            }
            if !g.all_finite() {
                let what = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFinite { what: format!("gradient of {what}"), iteration: self.t });
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
        let (one, eps, lr) = (S::one(), S::from_f64_lossy(c.epsilon), S::from_f64_lossy(lr));
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bias1 = one - b1.powi(t);
        let bias2 = one - b2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((theta, &gi), (mi, vi)) in iter {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs_g_l2_only: u64,
    pub epochs_d_only: u64,
    pub total_epochs: u64,
    /// Freeze the generator on every k-th iteration (0 = never).
    pub freeze_g_every: u64,
    /// Freeze the discriminator on every k-th iteration (0 = never).
    pub freeze_d_every: u64,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs_g_l2_only: 2,
            epochs_d_only: 4,
            total_epochs: 90,
            freeze_g_every: 0,
            freeze_d_every: 0,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    GeneratorL2Only,
    DiscriminatorOnly,
    Joint,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_g_l2_only + self.epochs_d_only > self.total_epochs {
            return Err(Error::Config("warm-up phases exceed total_epochs".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch normalization".into()));
        }
        Ok(())
    }

    pub fn phase(&self, epoch: u64) -> Phase {
        if epoch < self.epochs_g_l2_only {
            Phase::GeneratorL2Only
        } else if epoch < self.epochs_g_l2_only + self.epochs_d_only {
            Phase::DiscriminatorOnly
        } else {
            Phase::Joint
        }
    }

    fn frozen(every: u64, iteration: u64) -> bool {
        every > 0 && iteration % every == every - 1
    }

    /// Whether the generator is updated at a global iteration within `phase`.
    pub fn trains_generator(&self, phase: Phase, iteration: u64) -> bool {
        phase != Phase::DiscriminatorOnly && !Self::frozen(self.freeze_g_every, iteration)
    }

    pub fn trains_discriminator(&self, phase: Phase, iteration: u64) -> bool {
        phase != Phase::GeneratorL2Only && !Self::frozen(self.freeze_d_every, iteration)
    }
}

/// Everything about a training run that is not the model architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub l2_reduction: L2Reduction,
    /// Value written into the blanked central region of the input.
    pub blank_fill: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::default(),
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            l2_reduction: L2Reduction::Mean,
            blank_fill: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.adam.validate()?;
        self.loss.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: u64,
    pub iteration: u64,
    pub l2: f64,
    pub adv_g: f64,
    pub bce_d: f64,
    pub minimax: f64,
    pub score_real: f64,
    pub score_fake: f64,
}

pub const TRACE_HEADER: &str = "epoch,iter,l2,adv_g,bce_d,minimax,score_real,score_fake";

impl TraceRecord {
    pub const COLUMNS: usize = 8;

    pub fn to_row(&self) -> [f64; 8] {
        [
            self.epoch as f64,
            self.iteration as f64,
            self.l2,
            self.adv_g,
            self.bce_d,
            self.minimax,
            self.score_real,
            self.score_fake,
        ]
    }

    pub fn from_row(r: &[f64]) -> Self {
        Self {
            epoch: r[0] as u64,
            iteration: r[1] as u64,
            l2: r[2],
            adv_g: r[3],
            bce_d: r[4],
            minimax: r[5],
            score_real: r[6],
            score_fake: r[7],
        }
    }
}

/// Writes the trace as CSV with a header row, one record per iteration.
pub fn write_trace(mut out: impl Write, trace: &[TraceRecord]) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.iteration, r.l2, r.adv_g, r.bce_d, r.minimax, r.score_real, r.score_fake
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: u64,
    /// Completed iterations across all epochs.
    pub iteration: u64,
    pub rng: RngState,
    pub trace: Vec<TraceRecord>,
    /// Validation masked L2 after each completed epoch.
    pub validation: Vec<f64>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self { epoch: 0, iteration: 0, rng: Rng::new(seed).state(), trace: Vec::new(), validation: Vec::new() }
    }

    pub fn best_validation(&self) -> Option<f64> {
        self.validation.iter().copied().fold(None, |best, v| Some(best.map_or(v, |b: f64| b.min(v))))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub phase: Phase,
    pub iterations: usize,
    pub mean_l2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Balance {
    Balanced,
    DiscriminatorDominant,
    GeneratorDominant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub window: usize,
    pub mean_minimax: f64,
    pub mean_score_real: f64,
    pub mean_score_fake: f64,
    pub balance: Balance,
}

pub const DEFAULT_BALANCE_TOLERANCE: f64 = 0.2;

/// Windowed balance diagnosis over the last `window` trace records.
///
/// The mini-max value sits at `-ln 4` when both score means are 0.5. A well-separating
/// discriminator pushes it toward 0; a fooled one pushes it below `-ln 4`.
pub fn balance_report(trace: &[TraceRecord], window: usize, tolerance: f64) -> Result<BalanceReport> {
    if window == 0 || window > trace.len() {
        return Err(contract(format!("balance window {window} must be in 1..={}", trace.len())));
    }
    let recent = &trace[trace.len() - window..];
    let mean = |f: fn(&TraceRecord) -> f64| recent.iter().map(f).sum::<f64>() / window as f64;
    let v = mean(|r| r.minimax);
    let equilibrium = -(4f64.ln());
    let balance = if (v - equilibrium).abs() <= tolerance {
        Balance::Balanced
    } else if v > equilibrium {
        Balance::DiscriminatorDominant
    } else {
        Balance::GeneratorDominant
    };
    Ok(BalanceReport {
        window,
        mean_minimax: v,
        mean_score_real: mean(|r| r.score_real),
        mean_score_fake: mean(|r| r.score_fake),
        balance,
    })
}

/// Models, optimizer state and counters of one training run.
#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub generator: Generator<S>,
    pub discriminator: Discriminator<S>,
    pub adam_g: AdamState<S>,
    pub adam_d: AdamState<S>,
    pub config: TrainConfig,
    pub state: TrainState,
    mask: MaskSpec<S>,
    rng: Rng,
}

fn names(list: Vec<(String, &Tensor<impl Scalar>)>) -> Vec<String> {
    list.into_iter().map(|(n, _)| n).collect()
}

fn finite(what: &str, v: f64, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: what.to_string(), iteration })
    }
}

impl<S: Scalar> Trainer<S> {
    /// Fresh networks initialized from `seed`.
    pub fn new(model: &ModelConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Rng::new(seed);
        let generator = build_generator(model, &mut init)?;
        let discriminator = build_discriminator(model, &mut init)?;
        let adam_g = AdamState::new(config.adam, generator.named_params().into_iter().map(|(_, t)| t));
        let adam_d = AdamState::new(config.adam, discriminator.named_params().into_iter().map(|(_, t)| t));
        let state = TrainState::new(init.next_u64());
        Self::from_parts(generator, discriminator, adam_g, adam_d, config, state)
    }

    /// Reassembles a trainer, e.g. from a checkpoint.
    pub fn from_parts(
        generator: Generator<S>,
        discriminator: Discriminator<S>,
        adam_g: AdamState<S>,
        adam_d: AdamState<S>,
        config: TrainConfig,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        let model = &generator.config;
        let mask = MaskSpec::new(model.patch_size, model.margin_width, model.margin_weight, config.l2_reduction)?;
        let rng = Rng::from_state(state.rng);
        Ok(Self { generator, discriminator, adam_g, adam_d, config, state, mask, rng })
    }

    pub fn mask(&self) -> &MaskSpec<S> {
        &self.mask
    }

    pub fn phase(&self) -> Phase {
        self.config.schedule.phase(self.state.epoch)
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.schedule.total_epochs
    }

    fn learning_rate(&self) -> f64 {
        let adam = &self.config.adam;
        if adam.linear_decay && self.config.schedule.total_epochs > 0 {
            let frac = self.state.epoch as f64 / self.config.schedule.total_epochs as f64;
            adam.learning_rate * (1.0 - frac).max(0.0)
        } else {
            adam.learning_rate
        }
    }

    fn fill(&self) -> S {
        S::from_f64_lossy(self.config.blank_fill)
    }

    /// Runs one epoch over `images` (each `1 x S x S`, normalized to [-1, 1]).
    ///
    /// On a non-finite loss or gradient, all state rolls back to the start of the epoch.
    pub fn train_epoch(&mut self, images: &[Tensor<S>]) -> Result<EpochSummary> {
        if images.len() < 2 {
            return Err(contract("training needs at least two images"));
        }
        let snapshot = (
            self.generator.clone(),
            self.discriminator.clone(),
            self.adam_g.clone(),
            self.adam_d.clone(),
            self.state.clone(),
        );
        match self.run_epoch(images) {
            Ok(summary) => Ok(summary),
            Err(e) => {
                (self.generator, self.discriminator, self.adam_g, self.adam_d, self.state) = snapshot;
                self.rng = Rng::from_state(self.state.rng);
                Err(e)
            }
        }
    }

    fn run_epoch(&mut self, images: &[Tensor<S>]) -> Result<EpochSummary> {
        let phase = self.phase();
        let mut order: Vec<usize> = (0..images.len()).collect();
        self.rng.shuffle(&mut order);
        let batch = self.config.schedule.batch_size.min(images.len());
        let mut iterations = 0;
        let mut l2_sum = 0.0;
        for chunk in order.chunks(batch).filter(|c| c.len() >= 2) {
            let refs: Vec<&Tensor<S>> = chunk.iter().map(|&i| &images[i]).collect();
            let (context, target) = masked_batch(&refs, self.fill())?;
            let rec = self.train_iteration(&context, &target, phase)?;
            l2_sum += rec.l2;
            iterations += 1;
        }
        self.state.epoch += 1;
        self.state.rng = self.rng.state();
        Ok(EpochSummary { epoch: self.state.epoch, phase, iterations, mean_l2: l2_sum / iterations.max(1) as f64 })
    }

    /// One alternating update on a batch of masked inputs and their true central patches.
    pub fn train_iteration(&mut self, context: &Tensor<S>, target: &Tensor<S>, phase: Phase) -> Result<TraceRecord> {
        let it = self.state.iteration;
        let schedule = &self.config.schedule;
        let train_g = schedule.trains_generator(phase, it);
        let train_d = schedule.trains_discriminator(phase, it);

        let g_pass = self.generator.forward(context, Mode::Train)?;
        let fake = g_pass.output().clone();
        let d_real = self.discriminator.forward(target, Mode::Train)?;
        let d_fake = self.discriminator.forward(&fake, Mode::Train)?;
        let (s_real, s_fake) = (pass_scores(&d_real), pass_scores(&d_fake));

        let l2 = finite("masked L2 loss", weighted_l2(target, &fake, &self.mask)?.to_f64_lossy(), it)?;
        let adv_g = finite("generator adversarial loss", adv_loss_generator(&s_fake)?.to_f64_lossy(), it)?;
        let bce_d = finite("discriminator loss", adv_loss_discriminator(&s_real, &s_fake)?.to_f64_lossy(), it)?;
        let minimax = minimax_value(&s_real, &s_fake)?.to_f64_lossy();
        let record = TraceRecord {
            epoch: self.state.epoch,
            iteration: it,
            l2,
            adv_g,
            bce_d,
            minimax,
            score_real: s_real.mean()?.to_f64_lossy(),
            score_fake: s_fake.mean()?.to_f64_lossy(),
        };
        let lr = self.learning_rate();

        if train_d {
            let (g_real, g_fake) = adv_loss_discriminator_grad(&s_real, &s_fake)?;
            let (_, mut grads) = self.discriminator.backward(&d_real, &g_real)?;
            let (_, grads_fake) = self.discriminator.backward(&d_fake, &g_fake)?;
            for (a, b) in grads.iter_mut().zip(&grads_fake) {
                a.axpy(S::one(), b)?;
            }
            let labels = names(self.discriminator.named_params());
            self.adam_d.step(self.discriminator.params_mut(), &grads, &labels, lr)?;
            self.discriminator.commit(&d_real);
            self.discriminator.commit(&d_fake);
        }

        if train_g {
            let grad_l2 = weighted_l2_grad(target, &fake, &self.mask)?;
            let grad = if phase == Phase::GeneratorL2Only {
                grad_l2
            } else {
                // scores from the discriminator as it stands after its own update
                let d_pass = self.discriminator.forward(&fake, Mode::Train)?;
                let g_scores = adv_loss_generator_grad(&pass_scores(&d_pass))?;
                let (grad_adv, _) = self.discriminator.backward(&d_pass, &g_scores)?;
                joint_loss_grad(&grad_l2, &grad_adv, &self.config.loss)?
            };
            let grads = self.generator.backward(&g_pass, &grad)?;
            let labels = names(self.generator.named_params());
            self.adam_g.step(self.generator.params_mut(), &grads, &labels, lr)?;
            self.generator.commit(&g_pass);
        }

        self.state.trace.push(record);
        self.state.iteration += 1;
        Ok(record)
    }

    /// Mean masked L2 of eval-mode reconstructions over `images`.
    pub fn validate(&self, images: &[Tensor<S>]) -> Result<f64> {
        validation_l2(&self.generator, images, &self.mask, self.fill(), self.config.schedule.batch_size)
    }

    /// Validates and records the result for the epoch just completed.
    pub fn record_validation(&mut self, images: &[Tensor<S>]) -> Result<f64> {
        let v = self.validate(images)?;
        self.state.validation.push(v);
        Ok(v)
    }
}

/// Sample-weighted mean masked L2 of a generator in eval mode.
pub fn validation_l2<S: Scalar>(
    generator: &Generator<S>,
    images: &[Tensor<S>],
    mask: &MaskSpec<S>,
    fill: S,
    batch_size: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(contract("validation set is empty"));
    }
    let mut total = 0.0;
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&Tensor<S>> = chunk.iter().collect();
        let (context, target) = masked_batch(&refs, fill)?;
        let fake = generator.generate(&context, Mode::Eval)?;
        total += weighted_l2(&target, &fake, mask)?.to_f64_lossy() * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}
