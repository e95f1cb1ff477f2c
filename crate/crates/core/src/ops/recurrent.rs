//! The LSTM cell as a single fused tape op.

use crate::autodiff::{Backward, BackwardCtx, InputGrads, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::sigmoid;
use crate::tensor::{matmul_into, Float, Tensor};

/// Weights of one LSTM cell, gates stacked in the order input, forget,
/// candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// in×4·hidden
    pub w_input: Var,
    /// hidden×4·hidden
    pub w_hidden: Var,
    /// 4·hidden
    pub bias: Var,
}

struct LstmStepRule<T> {
    batch: usize,
    input: usize,
    hidden: usize,
    /// Activated gates i, f, g, o per row (B×4·hidden).
    gates: Vec<T>,
    /// tanh(c') (B×hidden).
    squashed: Vec<T>,
}

impl<T: Float> Backward<T> for LstmStepRule<T> {
    fn name(&self) -> &'static str {
        "lstm_cell"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T], grads: &mut InputGrads<T>) {
        let (b, n_in, hd) = (self.batch, self.input, self.hidden);
        let x = ctx.input(0).data();
        let state = ctx.input(1).data();
        let one = T::one();
        let mut dpre = vec![T::zero(); b * 4 * hd];
        let mut dc_prev = vec![T::zero(); b * hd];
        for r in 0..b {
            let gates = &self.gates[r * 4 * hd..][..4 * hd];
            let tc = &self.squashed[r * hd..][..hd];
            let c = &state[r * 2 * hd + hd..][..hd];
            let (dh, dc_out) = g[r * 2 * hd..][..2 * hd].split_at(hd);
            let dp = &mut dpre[r * 4 * hd..][..4 * hd];
            for j in 0..hd {
                let (i, f, gg, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
                let dc = dc_out[j] + dh[j] * o * (one - tc[j] * tc[j]);
                dp[j] = dc * gg * i * (one - i);
                dp[hd + j] = dc * c[j] * f * (one - f);
                dp[2 * hd + j] = dc * i * (one - gg * gg);
                dp[3 * hd + j] = dh[j] * tc[j] * o * (one - o);
                dc_prev[r * hd + j] = dc * f;
            }
        }
        if let Some(dx) = grads.get_mut(0) {
            let w_in = ctx.input(2).data();
            // dX (B×in) += dPre · W_inᵀ
            T::gemm(b, 4 * hd, n_in, one, &dpre, (4 * hd) as isize, 1, w_in, 1, (4 * hd) as isize, one, dx, n_in as isize, 1);
        }
        if let Some(ds) = grads.get_mut(1) {
            let w_h = ctx.input(3).data();
            // dH (B×hidden) += dPre · W_hᵀ, written into the h half of each state row
            T::gemm(b, 4 * hd, hd, one, &dpre, (4 * hd) as isize, 1, w_h, 1, (4 * hd) as isize, one, ds, (2 * hd) as isize, 1);
            for r in 0..b {
                for j in 0..hd {
                    ds[r * 2 * hd + hd + j] += dc_prev[r * hd + j];
                }
            }
        }
        if let Some(dw) = grads.get_mut(2) {
            T::gemm(n_in, b, 4 * hd, one, x, 1, n_in as isize, &dpre, (4 * hd) as isize, 1, one, dw, (4 * hd) as isize, 1);
        }
        if let Some(dw) = grads.get_mut(3) {
            T::gemm(hd, b, 4 * hd, one, state, 1, (2 * hd) as isize, &dpre, (4 * hd) as isize, 1, one, dw, (4 * hd) as isize, 1);
        }
        if let Some(db) = grads.get_mut(4) {
            for row in dpre.chunks(4 * hd) {
                db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
        }
    }
}

impl<T: Float> Tape<T> {
    /// One LSTM step on a packed state: `x` is B×in and `state` is B×2·hidden
    /// holding `[h | c]` per row. Returns the next packed state.
    pub fn lstm_step(&mut self, x: Var, state: Var, weights: &LstmWeights) -> Result<Var> {
        let hd = match self.shape(weights.w_hidden) {
            &[rows, cols] if cols == 4 * rows => rows,
            s => return Err(Error::config(format!("lstm_cell: recurrent weights have shape {s:?}"))),
        };
        let (b, n_in) = match self.shape(x) {
            &[b, n] => (b, n),
            s => return Err(Error::config(format!("lstm_cell: input must be B×in, got {s:?}"))),
        };
        if self.shape(state) != [b, 2 * hd] {
            return Err(Error::config(format!(
                "lstm_cell: packed state {:?} disagrees with batch {b} and hidden size {hd}",
                self.shape(state)
            )));
        }
        if self.shape(weights.w_input) != [n_in, 4 * hd] || self.shape(weights.bias) != [4 * hd] {
            return Err(Error::config(format!(
                "lstm_cell: input weights {:?} / bias {:?} do not match in={n_in}, hidden={hd}",
                self.shape(weights.w_input),
                self.shape(weights.bias)
            )));
        }
        let s = self.value(state).data();
        let mut pre = vec![T::zero(); b * 4 * hd];
        matmul_into(b, n_in, 4 * hd, self.value(x).data(), self.value(weights.w_input).data(), &mut pre, false);
        T::gemm(
            b,
            hd,
            4 * hd,
            T::one(),
            s,
            (2 * hd) as isize,
            1,
            self.value(weights.w_hidden).data(),
            (4 * hd) as isize,
            1,
            T::one(),
            &mut pre,
            (4 * hd) as isize,
            1,
        );
        let bias = self.value(weights.bias).data();
        let mut out = vec![T::zero(); b * 2 * hd];
        let mut squashed = vec![T::zero(); b * hd];
        for r in 0..b {
            let gates = &mut pre[r * 4 * hd..][..4 * hd];
            gates.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
            for (j, v) in gates.iter_mut().enumerate() {
                *v = if j / hd == 2 { v.tanh() } else { sigmoid(*v) };
            }
            let c = &s[r * 2 * hd + hd..][..hd];
            for j in 0..hd {
                let c_next = gates[hd + j] * c[j] + gates[j] * gates[2 * hd + j];
                let tc = c_next.tanh();
                squashed[r * hd + j] = tc;
                out[r * 2 * hd + j] = gates[3 * hd + j] * tc;
                out[r * 2 * hd + hd + j] = c_next;
            }
        }
        let out = Tensor::from_vec(&[b, 2 * hd], out)?;
        let rule = LstmStepRule { batch: b, input: n_in, hidden: hd, gates: pre, squashed };
        Ok(self.push(out, vec![x, state, weights.w_input, weights.w_hidden, weights.bias], rule))
    }

    /// One LSTM step on a batch of rows: `x` is B×in, `h` and `c` are B×hidden.
    ///
    /// Returns `(h', c')` with `c' = f⊙c + i⊙g` and `h' = o⊙tanh(c')`.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, weights: &LstmWeights) -> Result<(Var, Var)> {
        if self.shape(c) != self.shape(h) || self.shape(h).len() != 2 {
            return Err(Error::config(format!("lstm_cell: state shapes {:?}/{:?} must be equal B×hidden", self.shape(h), self.shape(c))));
        }
        let hd = self.shape(h)[1];
        let state = self.concat(&[h, c], 1)?;
        let next = self.lstm_step(x, state, weights)?;
        Ok((self.slice(next, 1, 0, hd)?, self.slice(next, 1, hd, hd)?))
    }
}
