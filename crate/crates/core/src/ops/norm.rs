//! Batch normalization and the per-pixel channel softmax.

use crate::autodiff::{Backward, BackwardCtx, InputGrads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
///
/// The running variance tracks the unbiased batch variance; normalization in
/// train mode uses the biased one.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update(&mut self, batch_mean: &[T], batch_var_unbiased: &[T]) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var_unbiased) {
            *r = keep * *r + m * b;
        }
    }
}

struct BatchNormRule<T> {
    dims: (usize, usize, usize, usize),
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Batch statistics flow into the gradient only in train mode.
    train: bool,
}

impl<T: Float> Backward<T> for BatchNormRule<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let (n, c, h, w) = self.dims;
        let hw = h * w;
        let m = T::from_usize(n * hw).unwrap();
        let gamma = ctx.input(1).data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * self.xhat[i];
                }
            }
        }
        let (dx, dgamma, dbeta) = grads.triple_mut();
        if let Some(dgamma) = dgamma {
            dgamma.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
        }
        if let Some(dbeta) = dbeta {
            dbeta.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
        }
        if let Some(dx) = dx {
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    let scale = gamma[ch] * self.inv_std[ch];
                    for i in base..base + hw {
                        dx[i] += if self.train { scale * (g[i] - (sum_g[ch] + self.xhat[i] * sum_gx[ch]) / m) } else { scale * g[i] };
                    }
                }
            }
        }
    }
}

struct SoftmaxRule;

impl<T: Float> Backward<T> for SoftmaxRule {
    fn name(&self) -> &'static str {
        "channel_softmax"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let Some(dx) = grads.get_mut(0) else { return };
        let y = ctx.output();
        let (n, d, h, w) = y.dims4().expect("rank-4");
        let y = y.data();
        let hw = h * w;
        for s in 0..n {
            let base = s * d * hw;
            for p in 0..hw {
                let dot: T = (0..d).map(|i| g[base + i * hw + p] * y[base + i * hw + p]).sum();
                for i in 0..d {
                    let idx = base + i * hw + p;
                    dx[idx] += y[idx] * (g[idx] - dot);
                }
            }
        }
    }
}

/// Per-channel mean and (biased) variance over N·H·W.
fn channel_moments<T: Float>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = T::from_usize(n * hw).unwrap();
    let data = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for s in 0..n {
            acc += data[(s * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        mean[ch] = acc / count;
        let mut sq = T::zero();
        for s in 0..n {
            for &v in &data[(s * c + ch) * hw..][..hw] {
                let d = v - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / count;
    }
    Ok((mean, var))
}

impl<T: Float> Tape<T> {
    /// Batch normalization over an N×C×H×W map.
    ///
    /// Train mode standardizes with batch statistics and folds them into
    /// `state`; eval mode normalizes with `state` and leaves it unchanged.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: Mode, state: &mut RunningStats<T>) -> Result<Var> {
        let dims @ (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.mean.len() != c {
            return Err(Error::config(format!("batch_norm: parameters do not match {c} channels")));
        }
        let count = n * h * w;
        if count == 0 {
            return Err(Error::config("batch_norm over an empty batch"));
        }
        let eps = T::lit(BN_EPS);
        let (mean, var) = match mode {
            Mode::Train => {
                let (mean, var) = channel_moments(self.value(x))?;
                let unbiased: Vec<T> = if count > 1 {
                    let f = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                state.update(&mean, &unbiased);
                (mean, var)
            }
            Mode::Eval => (state.mean.clone(), state.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let hw = h * w;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(out, vec![x, gamma, beta], BatchNormRule { dims, xhat, inv_std, train: mode == Mode::Train }))
    }

    /// Softmax over the channel axis at every (n, h, w), computed with the
    /// per-pixel maximum subtracted first.
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, d, h, w) = self.value(x).dims4()?;
        if d == 0 {
            return Err(Error::config("channel_softmax over zero channels"));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for s in 0..n {
            let base = s * d * hw;
            for p in 0..hw {
                let max = (0..d).map(|i| src[base + i * hw + p]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..d {
                    let e = (src[base + i * hw + p] - max).exp();
                    out[base + i * hw + p] = e;
                    total += e;
                }
                for i in 0..d {
                    out[base + i * hw + p] = out[base + i * hw + p] / total;
                }
            }
        }
        let out = Tensor::from_vec(&[n, d, h, w], out)?;
        Ok(self.push(out, vec![x], SoftmaxRule))
    }
}
