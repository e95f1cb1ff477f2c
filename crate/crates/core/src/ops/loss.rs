//! Binary cross-entropy against a fixed target.

use crate::autodiff::{Backward, BackwardCtx, InputGrads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

struct BceRule<T> {
    target: Vec<T>,
}

impl<T: Float> Backward<T> for BceRule<T> {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let Some(dp) = grads.get_mut(0) else { return };
        let p = ctx.input(0).data();
        let lo = T::lit(PROB_CLAMP);
        let hi = T::one() - lo;
        let scale = g[0] / T::from_usize(p.len()).unwrap();
        for ((d, &pi), &yi) in dp.iter_mut().zip(p).zip(&self.target) {
            if pi < lo || pi > hi {
                continue;
            }
            *d += scale * (pi - yi) / (pi * (T::one() - pi));
        }
    }
}

impl<T: Float> Tape<T> {
    /// Mean of `−[y ln p + (1 − y) ln(1 − p)]` over all elements.
    pub fn bce_mean(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::config(format!("bce: prediction {:?} vs target {:?}", self.shape(p), target.shape())));
        }
        if target.data().iter().any(|&y| !(T::zero()..=T::one()).contains(&y)) {
            return Err(Error::data("bce targets must lie in [0, 1]"));
        }
        let lo = T::lit(PROB_CLAMP);
        let hi = T::one() - lo;
        let total: T = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pi, &yi)| {
                let pc = pi.max(lo).min(hi);
                -(yi * pc.ln() + (T::one() - yi) * (T::one() - pc).ln())
            })
            .sum();
        let out = Tensor::scalar(total / T::from_usize(target.len()).unwrap());
        Ok(self.push(out, vec![p], BceRule { target: target.data().to_vec() }))
    }
}
