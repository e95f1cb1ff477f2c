//! SGD with momentum and weight decay, step learning-rate decay and the
//! deterministic training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment, collate, AugmentSpec, Sample};
use crate::error::{Error, Result};
use crate::net::SaliencyNet;
use crate::nn::{Group, ParamRegistry};
use crate::ops::Mode;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Learning-rate factor of the encoder group.
    pub encoder_lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub max_steps: usize,
    pub decay_factor: f64,
    pub decay_steps: usize,
    pub seed: u64,
    /// Resize/flip/crop augmentation of every drawn sample.
    #[serde(default = "yes")]
    pub augment: bool,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            base_lr: 0.01,
            encoder_lr_multiplier: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch: 10,
            max_steps: 20_000,
            decay_factor: 0.1,
            decay_steps: 7_000,
            seed: 0,
            augment: true,
        }
    }

    /// The paper recipe with a tenth of the steps and batch 8.
    pub fn toy() -> Self {
        Self { batch: 8, max_steps: 2_000, decay_steps: 700, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.base_lr, self.encoder_lr_multiplier, self.decay_factor];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) || self.batch == 0 || self.decay_steps == 0 {
            return Err(Error::config(format!("training hyperparameters must be positive: {self:?}")));
        }
        // zero momentum or decay is allowed for plain-gradient diagnostics
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || self.decay_factor > 1.0 {
            return Err(Error::config("momentum must lie in [0, 1), weight decay be non-negative, decay factor at most 1"));
        }
        // max_steps = 0 writes the initialization and skips the check
        if self.max_steps > 0 && self.decay_steps > self.max_steps {
            return Err(Error::config(format!("decay_steps {} exceeds max_steps {}", self.decay_steps, self.max_steps)));
        }
        Ok(())
    }
}

/// `base_lr · decay_factor^⌊step / decay_steps⌋`.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.decay_factor.powi((step / cfg.decay_steps) as i32)
}

pub fn group_lr(group: Group, step: usize, cfg: &TrainConfig) -> f64 {
    let lr = lr_at_step(step, cfg);
    match group {
        Group::Encoder => lr * cfg.encoder_lr_multiplier,
        Group::Decoder => lr,
    }
}

/// Momentum buffers, one per registry entry (empty for buffers).
#[derive(Clone, Debug)]
pub struct Velocity<T>(pub Vec<Tensor<T>>);

impl<T: Float> Velocity<T> {
    pub fn zeros(registry: &ParamRegistry<T>) -> Self {
        Self(registry.entries().iter().map(|e| if e.trainable { Tensor::zeros(e.tensor.shape()) } else { Tensor::zeros(&[0]) }).collect())
    }
}

/// One update of every trainable entry:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v` with the group's learning rate.
/// `grads` is aligned with the registry; `None` counts as a zero gradient.
pub fn sgd_momentum_step<T: Float>(
    registry: &mut ParamRegistry<T>,
    grads: &[Option<Tensor<T>>],
    velocity: &mut Velocity<T>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    if grads.len() != registry.len() || velocity.0.len() != registry.len() {
        return Err(Error::usage(format!(
            "{} gradients and {} momentum buffers for {} registry entries",
            grads.len(),
            velocity.0.len(),
            registry.len()
        )));
    }
    let (mu, wd) = (T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    for ((entry, g), v) in registry.entries_mut().iter_mut().zip(grads).zip(&mut velocity.0) {
        if !entry.trainable {
            continue;
        }
        if let Some(g) = g {
            if g.shape() != entry.tensor.shape() {
                return Err(Error::usage(format!("gradient shape {:?} for `{}`", g.shape(), entry.name)));
            }
        }
        let lr = T::lit(group_lr(entry.group, step, cfg));
        let p = entry.tensor.data_mut();
        let v = v.data_mut();
        for i in 0..p.len() {
            let gi = g.as_ref().map_or(T::zero(), |g| g.data()[i]);
            v[i] = mu * v[i] + (gi + wd * p[i]);
            p[i] -= lr * v[i];
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Zero-based index of the step just taken.
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
}

/// Owns parameters, momentum and the data-order RNG of one run.
pub struct Trainer {
    net: SaliencyNet,
    cfg: TrainConfig,
    pub params: ParamRegistry<f32>,
    velocity: Velocity<f32>,
    step: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(net: SaliencyNet, cfg: TrainConfig) -> Result<Self> {
        let params = net.init_params(cfg.seed)?;
        Self::with_params(net, cfg, params)
    }

    pub fn with_params(net: SaliencyNet, cfg: TrainConfig, params: ParamRegistry<f32>) -> Result<Self> {
        cfg.validate()?;
        let velocity = Velocity::zeros(&params);
        // data order and augmentation draw from a stream separate from init
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
        Ok(Self { net, cfg, params, velocity, step: 0, rng, order: Vec::new(), cursor: 0 })
    }

    pub fn net(&self) -> &SaliencyNet {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Next mini-batch: epochs are shuffled permutations, samples augmented.
    pub fn next_batch(&mut self, data: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if data.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        let mut picked = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch {
            if self.cursor >= self.order.len() {
                self.order = (0..data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let sample = &data[self.order[self.cursor]];
            self.cursor += 1;
            picked.push(if self.cfg.augment {
                let spec = AugmentSpec::for_size(self.net.spec().input_size);
                augment(sample, spec, &mut self.rng)?
            } else {
                sample.clone()
            });
        }
        collate(&picked.iter().collect::<Vec<_>>())
    }

    /// Loss and registry-aligned gradients on one batch, without updating.
    pub fn loss_and_grads(&mut self, images: &Tensor<f32>, masks: &Tensor<f32>) -> Result<(f32, Vec<Option<Tensor<f32>>>)> {
        let mut tape = Tape::new();
        let mut bind = self.params.bind(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.net.forward(&mut tape, &mut bind, x, Mode::Train)?;
        let loss = self.net.loss(&mut tape, &out, masks)?;
        tape.check_finite()?;
        let mut grads = tape.backward(loss)?;
        let aligned: Vec<Option<Tensor<f32>>> = self
            .params
            .entries()
            .iter()
            .map(|e| if e.trainable { bind.var(&e.name).ok().and_then(|v| grads.take(&tape, v)) } else { None })
            .collect();
        for (e, g) in self.params.entries().iter().zip(&aligned) {
            if g.as_ref().is_some_and(|g| !g.is_finite()) {
                return Err(Error::Numeric { op: "backward".into(), detail: format!("non-finite gradient for `{}`", e.name) });
            }
        }
        bind.store_bn(&mut self.params);
        Ok((tape.value(loss).data()[0], aligned))
    }

    /// One optimizer step on the given batch.
    pub fn train_step(&mut self, images: &Tensor<f32>, masks: &Tensor<f32>) -> Result<StepReport> {
        let (loss, grads) = self.loss_and_grads(images, masks)?;
        let step = self.step;
        sgd_momentum_step(&mut self.params, &grads, &mut self.velocity, &self.cfg, step)?;
        self.step += 1;
        Ok(StepReport { step, loss, lr: lr_at_step(step, &self.cfg) })
    }

    /// Draw a batch from `data` and take one step.
    pub fn step_on(&mut self, data: &[Sample]) -> Result<StepReport> {
        let (images, masks) = self.next_batch(data)?;
        self.train_step(&images, &masks)
    }

    /// Train for `steps` steps, reporting each.
    pub fn run(&mut self, data: &[Sample], steps: usize, mut on_step: impl FnMut(&StepReport)) -> Result<Vec<f32>> {
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let report = self.step_on(data)?;
            on_step(&report);
            losses.push(report.loss);
        }
        Ok(losses)
    }
}
